"""Grid hashing for geographic coordinates.

Maps a (lat, lon) point onto a fixed 2^30 x 2^30 grid, interleaves the two
grid indices into a single Z-order integer, and renders it as a 12-character
base-32 cell code. Nearby points share long code prefixes, which is what the
spatial embedding layer feeds on: one shared character of prefix halves the
cell extent in each dimension alternately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# Base-32 digit set used for cell codes (no a, i, l, o).
_BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"

GRID_BITS = 30           # bits per dimension
CODE_LEN = 12            # characters in a cell code
_BITS_PER_CHAR = 5
_CELLS = 1 << GRID_BITS  # grid cells per dimension

assert GRID_BITS * 2 == CODE_LEN * _BITS_PER_CHAR


@dataclass(frozen=True)
class GeoPoint:
    """A WGS84 coordinate pair, validated on construction."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and -90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude out of range [-90, 90]: {self.lat!r}")
        if not (math.isfinite(self.lon) and -180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude out of range [-180, 180]: {self.lon!r}")


def quantize(point: GeoPoint) -> tuple[int, int]:
    """Map a point to integer grid indices (x_idx for lon, y_idx for lat).

    Each axis is divided into 2^30 equal cells; the index is the cell the
    coordinate falls in, with the upper boundary (lat=90 or lon=180) clamped
    into the last cell.
    """
    x_idx = math.floor((point.lon + 180.0) / 360.0 * _CELLS)
    y_idx = math.floor((point.lat + 90.0) / 180.0 * _CELLS)
    x_idx = min(max(x_idx, 0), _CELLS - 1)
    y_idx = min(max(y_idx, 0), _CELLS - 1)
    return x_idx, y_idx


def interleave(x_idx: int, y_idx: int) -> int:
    """Interleave two 30-bit grid indices into one 60-bit Z-order integer.

    Longitude comes first: reading the result from its most significant bit,
    the bits alternate lon, lat, lon, lat, ... so bit i of x_idx lands at
    position 2i+1 and bit i of y_idx at position 2i (counted from the LSB).
    """
    if not (0 <= x_idx < _CELLS):
        raise ValueError(f"x_idx out of range [0, 2^{GRID_BITS}): {x_idx!r}")
    if not (0 <= y_idx < _CELLS):
        raise ValueError(f"y_idx out of range [0, 2^{GRID_BITS}): {y_idx!r}")
    z = 0
    for i in range(GRID_BITS):
        z |= ((x_idx >> i) & 1) << (2 * i + 1)
        z |= ((y_idx >> i) & 1) << (2 * i)
    return z


def encode_cell(z: int) -> str:
    """Render a 60-bit Z-order integer as 12 base-32 characters, MSB first."""
    if not (0 <= z < 1 << (2 * GRID_BITS)):
        raise ValueError(f"z out of range [0, 2^{2 * GRID_BITS}): {z!r}")
    chars = []
    for pos in range(CODE_LEN):
        shift = _BITS_PER_CHAR * (CODE_LEN - 1 - pos)
        chars.append(_BASE32[(z >> shift) & 0x1F])
    return "".join(chars)


def decode_cell(code: str) -> int:
    """Inverse of encode_cell."""
    if len(code) != CODE_LEN:
        raise ValueError(f"cell code must be {CODE_LEN} chars: {code!r}")
    z = 0
    for ch in code:
        digit = _BASE32.find(ch)
        if digit < 0:
            raise ValueError(f"invalid cell code character: {ch!r}")
        z = (z << _BITS_PER_CHAR) | digit
    return z


def cell_of(point: GeoPoint) -> str:
    """Cell code of the grid cell containing a point."""
    x_idx, y_idx = quantize(point)
    return encode_cell(interleave(x_idx, y_idx))


def common_prefix_len(a: str, b: str) -> int:
    """Number of leading characters two cell codes share."""
    n = 0
    for ca, cb in zip(a, b):
        if ca != cb:
            break
        n += 1
    return n
