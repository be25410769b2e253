"""Check-in ingestion: TSV parsing, id densification, leave-one-out split,
training windows, and the binary bundle that carries prepared data.

Input rows are `user_id<TAB>ISO8601<TAB>lat<TAB>lon<TAB>poi_id`. POI ids are
densified to integers starting at 1 (0 is reserved for sequence padding)
in first-appearance order, so runs over the same file are reproducible.
"""

from __future__ import annotations

import datetime as _dt
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .geocode import CODE_LEN, GeoPoint, cell_of

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
PAD_ID = 0          # sequence padding; never a real POI
PAD_DAY = -1        # day slot for padded positions (always masked out)

# A POI re-appearing more than this far (degrees) from its first recorded
# location is reported; the first location wins either way.
RELOCATION_TOLERANCE_DEG = 1e-4


class ParseError(ValueError):
    """A malformed check-in row; the message carries the line number."""


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    timestamp: int      # POSIX seconds, UTC
    point: GeoPoint
    poi_id: str


@dataclass
class Catalog:
    """Dense id space shared by every downstream stage.

    Index 0 of the POI arrays is the padding slot and holds placeholders.
    """

    poi_ids: list = field(default_factory=lambda: [""])
    poi_lat: list = field(default_factory=lambda: [math.nan])
    poi_lon: list = field(default_factory=lambda: [math.nan])
    poi_cells: list = field(default_factory=lambda: [""])
    user_ids: list = field(default_factory=list)
    poi_index: dict = field(default_factory=dict)
    user_index: dict = field(default_factory=dict)

    @property
    def num_pois(self) -> int:
        return len(self.poi_ids) - 1

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    def add_poi(self, poi_id: str, point: GeoPoint) -> int:
        dense = self.poi_index.get(poi_id)
        if dense is not None:
            prev = GeoPoint(self.poi_lat[dense], self.poi_lon[dense])
            if (abs(prev.lat - point.lat) > RELOCATION_TOLERANCE_DEG
                    or abs(prev.lon - point.lon) > RELOCATION_TOLERANCE_DEG):
                log.warning(
                    "poi %s reported at (%f, %f) but first seen at (%f, %f); keeping first",
                    poi_id, point.lat, point.lon, prev.lat, prev.lon)
            return dense
        dense = len(self.poi_ids)
        self.poi_ids.append(poi_id)
        self.poi_lat.append(point.lat)
        self.poi_lon.append(point.lon)
        self.poi_cells.append(cell_of(point))
        self.poi_index[poi_id] = dense
        return dense

    def add_user(self, user_id: str) -> int:
        dense = self.user_index.get(user_id)
        if dense is None:
            dense = len(self.user_ids)
            self.user_ids.append(user_id)
            self.user_index[user_id] = dense
        return dense


@dataclass
class UserSequence:
    """One user's visits in time order (dense ids, day indices)."""

    user: int
    items: np.ndarray   # int64, values >= 1
    days: np.ndarray    # int64


@dataclass
class UserExample:
    """Leave-one-out split of one user's sequence: everything but the last
    visit trains, the last visit is the held-out target."""

    user: int
    train_items: np.ndarray
    train_days: np.ndarray
    test_item: int
    test_day: int


def parse_timestamp(text: str) -> int:
    """ISO-8601 timestamp to POSIX seconds. A trailing Z or a missing offset
    both mean UTC; fractional seconds are floored."""
    t = text.strip()
    if t.endswith(("Z", "z")):
        t = t[:-1] + "+00:00"
    try:
        dt = _dt.datetime.fromisoformat(t)
    except ValueError:
        raise ParseError(f"bad timestamp: {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=_dt.timezone.utc)
    return math.floor(dt.timestamp())


def day_index(timestamp: int) -> int:
    """Whole UTC days since the epoch (floor division, exact for negatives)."""
    return timestamp // SECONDS_PER_DAY


def parse_checkins(path) -> list:
    """Read a check-in TSV. Malformed rows raise ParseError naming the line;
    blank lines are skipped."""
    checkins = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise ParseError(
                    f"line {lineno}: expected 5 tab-separated fields, got {len(fields)}")
            user_id, ts_text, lat_text, lon_text, poi_id = fields
            if not user_id or not poi_id:
                raise ParseError(f"line {lineno}: empty user or poi id")
            try:
                ts = parse_timestamp(ts_text)
            except ParseError as e:
                raise ParseError(f"line {lineno}: {e}") from None
            try:
                lat = float(lat_text)
                lon = float(lon_text)
            except ValueError:
                raise ParseError(
                    f"line {lineno}: bad coordinate: {lat_text!r}, {lon_text!r}") from None
            try:
                point = GeoPoint(lat, lon)
            except ValueError as e:
                raise ParseError(f"line {lineno}: {e}") from None
            checkins.append(CheckIn(user_id, ts, point, poi_id))
    return checkins


def build_sequences(checkins) -> tuple:
    """Densify ids and group visits per user, each sorted by timestamp.

    Returns (catalog, sequences). Sequences appear in user first-appearance
    order. Sorting is stable, so same-second visits keep input order.
    """
    catalog = Catalog()
    per_user: dict = {}
    for ci in checkins:
        u = catalog.add_user(ci.user_id)
        p = catalog.add_poi(ci.poi_id, ci.point)
        per_user.setdefault(u, []).append((ci.timestamp, p))
    sequences = []
    for u in range(catalog.num_users):
        visits = per_user[u]
        visits.sort(key=lambda tp: tp[0])  # stable: ties keep input order
        items = np.array([p for _, p in visits], dtype=np.int64)
        days = np.array([day_index(ts) for ts, _ in visits], dtype=np.int64)
        sequences.append(UserSequence(u, items, days))
    return catalog, sequences


def filter_and_split(sequences, min_len: int = 5) -> list:
    """Drop users with fewer than min_len visits, then hold out each
    remaining user's final visit as the test target."""
    if min_len < 2:
        raise ValueError(f"min_len must be at least 2, got {min_len}")
    out = []
    for seq in sequences:
        if len(seq.items) < min_len:
            continue
        out.append(UserExample(
            user=seq.user,
            train_items=seq.items[:-1].copy(),
            train_days=seq.days[:-1].copy(),
            test_item=int(seq.items[-1]),
            test_day=int(seq.days[-1]),
        ))
    return out


def window(items, days, max_len: int) -> tuple:
    """Shift-by-one training window over one user's train items.

    Position t of the input predicts position t of the targets (the next
    visit). Only the last max_len steps are kept; shorter histories are
    left-padded with PAD_ID / PAD_DAY and masked out.

    Returns (input_ids, target_ids, input_days, target_mask).
    """
    if max_len < 1:
        raise ValueError(f"max_len must be positive, got {max_len}")
    items = np.asarray(items, dtype=np.int64)
    days = np.asarray(days, dtype=np.int64)
    x = items[:-1][-max_len:]
    y = items[1:][-max_len:]
    d = days[:-1][-max_len:]
    pad = max_len - len(x)
    input_ids = np.concatenate([np.full(pad, PAD_ID, dtype=np.int64), x])
    target_ids = np.concatenate([np.full(pad, PAD_ID, dtype=np.int64), y])
    input_days = np.concatenate([np.full(pad, PAD_DAY, dtype=np.int64), d])
    mask = target_ids != PAD_ID
    return input_ids, target_ids, input_days, mask


def eval_window(items, days, max_len: int) -> tuple:
    """Inference window: the last max_len visits themselves (no shift),
    left-padded. Returns (input_ids, input_days, last_position)."""
    if max_len < 1:
        raise ValueError(f"max_len must be positive, got {max_len}")
    items = np.asarray(items, dtype=np.int64)[-max_len:]
    days = np.asarray(days, dtype=np.int64)[-max_len:]
    pad = max_len - len(items)
    input_ids = np.concatenate([np.full(pad, PAD_ID, dtype=np.int64), items])
    input_days = np.concatenate([np.full(pad, PAD_DAY, dtype=np.int64), days])
    return input_ids, input_days, max_len - 1


def stats_summary(catalog, sequences) -> str:
    """Corpus size overview, one figure per line."""
    total = sum(len(s.items) for s in sequences)
    return (
        f"users\t{catalog.num_users}\n"
        f"pois\t{catalog.num_pois}\n"
        f"checkins\t{total}\n"
    )


# --- bundle container -------------------------------------------------------

_BUNDLE_MAGIC = b"SANSTBNDL"
_BUNDLE_VERSION = 1


def save_bundle(path, catalog, sequences):
    """Serialize a prepared corpus. Byte-identical for identical inputs."""
    with open(path, "wb") as f:
        f.write(_BUNDLE_MAGIC)
        f.write(struct.pack("<II", _BUNDLE_VERSION, catalog.num_pois))
        for dense in range(1, catalog.num_pois + 1):
            pid = catalog.poi_ids[dense].encode("utf-8")
            cell = catalog.poi_cells[dense].encode("ascii")
            assert len(cell) == CODE_LEN
            f.write(struct.pack("<H", len(pid)))
            f.write(pid)
            f.write(struct.pack("<dd", catalog.poi_lat[dense], catalog.poi_lon[dense]))
            f.write(cell)
        f.write(struct.pack("<I", len(sequences)))
        for seq in sequences:
            uid = catalog.user_ids[seq.user].encode("utf-8")
            f.write(struct.pack("<H", len(uid)))
            f.write(uid)
            f.write(struct.pack("<I", len(seq.items)))
            for item, day in zip(seq.items, seq.days):
                f.write(struct.pack("<Iq", int(item), int(day)))


def load_bundle(path) -> tuple:
    """Inverse of save_bundle. Returns (catalog, sequences)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_BUNDLE_MAGIC)] != _BUNDLE_MAGIC:
        raise ValueError(f"not a bundle file: {path}")
    off = len(_BUNDLE_MAGIC)
    version, num_pois = struct.unpack_from("<II", blob, off)
    off += 8
    if version != _BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {version}")
    catalog = Catalog()
    for _ in range(num_pois):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        pid = blob[off : off + n].decode("utf-8")
        off += n
        lat, lon = struct.unpack_from("<dd", blob, off)
        off += 16
        cell = blob[off : off + CODE_LEN].decode("ascii")
        off += CODE_LEN
        dense = len(catalog.poi_ids)
        catalog.poi_ids.append(pid)
        catalog.poi_lat.append(lat)
        catalog.poi_lon.append(lon)
        catalog.poi_cells.append(cell)
        catalog.poi_index[pid] = dense
    (num_users,) = struct.unpack_from("<I", blob, off)
    off += 4
    sequences = []
    for _ in range(num_users):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        uid = blob[off : off + n].decode("utf-8")
        off += n
        u = catalog.add_user(uid)
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        items = np.empty(count, dtype=np.int64)
        days = np.empty(count, dtype=np.int64)
        for i in range(count):
            item, day = struct.unpack_from("<Iq", blob, off)
            off += 12
            items[i] = item
            days[i] = day
        sequences.append(UserSequence(u, items, days))
    if off != len(blob):
        raise ValueError(f"trailing bytes in bundle: {path}")
    return catalog, sequences
