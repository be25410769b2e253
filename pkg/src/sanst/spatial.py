"""Proximity-preserving spatial embeddings.

A POI's grid cell code is read character by character by a bidirectional
LSTM; the final hidden states of the two directions, concatenated (forward
first), are the POI's spatial embedding. Because nearby POIs share long
code prefixes, the recurrences see nearly identical inputs and produce
nearby embeddings, without any pairwise distance supervision.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .geocode import _BASE32, CODE_LEN

CHAR_VOCAB = len(_BASE32)  # 32
_CHAR_INDEX = {ch: i for i, ch in enumerate(_BASE32)}

_GATES = ("i", "f", "o", "g")
_DIRECTIONS = ("fwd", "bwd")


class SpatialParams:
    """Character table plus the two LSTM directions.

    Weight names follow the `lstm_{fwd,bwd}_{w,u,b}{i,f,o,g}` scheme used in
    checkpoints: w* maps the input character embedding, u* the previous
    hidden state, b* is the gate bias.
    """

    def __init__(self, d_s: int, h_s: int, rng: np.random.Generator | None):
        self.d_s = d_s
        self.h_s = h_s
        if rng is None:
            init = lambda *shape: np.zeros(shape)
        else:
            init = lambda *shape: rng.uniform(-0.05, 0.05, size=shape)
        self.char_table = ad.Tensor(init(CHAR_VOCAB, d_s), requires_grad=True)
        self.direction = {}
        for dname in _DIRECTIONS:
            gates = {}
            for g in _GATES:
                gates["w" + g] = ad.Tensor(init(d_s, h_s), requires_grad=True)
                gates["u" + g] = ad.Tensor(init(h_s, h_s), requires_grad=True)
                gates["b" + g] = ad.Tensor(np.zeros(h_s), requires_grad=True)
            self.direction[dname] = gates

    @property
    def d_es(self) -> int:
        return 2 * self.h_s

    def named(self) -> dict:
        """Stable name -> Tensor mapping for checkpoints and the optimizer."""
        out = {"char_table": self.char_table}
        for dname in _DIRECTIONS:
            for g in _GATES:
                for kind in ("w", "u", "b"):
                    out[f"lstm_{dname}_{kind}{g}"] = self.direction[dname][kind + g]
        return out


def lstm_step(x: ad.Tensor, h: ad.Tensor, c: ad.Tensor, gates: dict) -> tuple:
    """One LSTM step over a batch of rows.

    x: (B, d_s) inputs, h/c: (B, h_s) previous state. Returns (h', c') with
    input/forget/output sigmoid gates and a tanh candidate.
    """

    def gate(name):
        pre = ad.add(ad.matmul(x, gates["w" + name]), ad.matmul(h, gates["u" + name]))
        return ad.add_bias(pre, gates["b" + name])

    i = ad.sigmoid(gate("i"))
    f = ad.sigmoid(gate("f"))
    o = ad.sigmoid(gate("o"))
    g = ad.tanh(gate("g"))
    c_next = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_next = ad.mul(o, ad.tanh(c_next))
    return h_next, c_next


def _char_ids(codes) -> np.ndarray:
    ids = np.empty((len(codes), CODE_LEN), dtype=np.int64)
    for r, code in enumerate(codes):
        if len(code) != CODE_LEN:
            raise ValueError(f"cell code must be {CODE_LEN} chars: {code!r}")
        for t, ch in enumerate(code):
            idx = _CHAR_INDEX.get(ch)
            if idx is None:
                raise ValueError(f"invalid cell code character: {ch!r}")
            ids[r, t] = idx
    return ids


def _run_direction(ids: np.ndarray, params: SpatialParams, dname: str) -> ad.Tensor:
    """Run one direction over all rows at once; returns final hidden (n, h_s)."""
    n = ids.shape[0]
    gates = params.direction[dname]
    h = ad.Tensor(np.zeros((n, params.h_s)))
    c = ad.Tensor(np.zeros((n, params.h_s)))
    steps = range(CODE_LEN) if dname == "fwd" else range(CODE_LEN - 1, -1, -1)
    for t in steps:
        x = ad.embedding_lookup(params.char_table, ids[:, t])
        h, c = lstm_step(x, h, c, gates)
    return h


def encode_codes(codes, params: SpatialParams) -> ad.Tensor:
    """Embed a batch of cell codes: (n, 2*h_s), forward direction first."""
    if not codes:
        raise ValueError("encode_codes needs at least one code")
    ids = _char_ids(codes)
    h_fwd = _run_direction(ids, params, "fwd")
    h_bwd = _run_direction(ids, params, "bwd")
    return ad.concat_cols(h_fwd, h_bwd)


def encode_code(code: str, params: SpatialParams) -> ad.Tensor:
    """Embed one cell code: (1, 2*h_s)."""
    return encode_codes([code], params)


class CellTable:
    """Spatial embeddings for a fixed set of cells, computed in one batched
    pass with a leading all-zero row for the padding id.

    Each distinct cell is encoded exactly once per table, however many POIs
    share it and however many times its rows are gathered.
    """

    def __init__(self, cells, params: SpatialParams):
        self.row_of = {}
        ordered = []
        for cell in cells:
            if cell not in self.row_of:
                self.row_of[cell] = len(ordered) + 1
                ordered.append(cell)
        zero = ad.Tensor(np.zeros((1, params.d_es)))
        if ordered:
            self.matrix = ad.vstack(zero, encode_codes(ordered, params))
        else:
            self.matrix = zero

    def rows(self, poi_ids, poi_cells) -> ad.Tensor:
        """Gather embeddings for dense POI ids; id 0 yields the zero row."""
        ids = np.asarray(poi_ids)
        idx = np.empty(ids.shape[0], dtype=np.int64)
        for i, pid in enumerate(ids):
            idx[i] = 0 if pid == 0 else self.row_of[poi_cells[pid]]
        return ad.embedding_lookup(self.matrix, idx)


def cells_for(poi_ids, poi_cells) -> list:
    """Distinct cells of the non-padding ids, in first-appearance order."""
    seen = set()
    out = []
    for pid in np.asarray(poi_ids).reshape(-1):
        if pid == 0:
            continue
        cell = poi_cells[pid]
        if cell not in seen:
            seen.add(cell)
            out.append(cell)
    return out


def spatial_embedding_batch(poi_ids, poi_cells, params: SpatialParams,
                            cache: CellTable | None = None) -> ad.Tensor:
    """Spatial embedding rows for a batch of dense POI ids.

    poi_cells is the catalog's dense-id -> cell code list. Passing a
    prebuilt CellTable reuses its one batched encoding; otherwise a table
    covering exactly these ids is built on the spot.
    """
    ids = np.asarray(poi_ids)
    if cache is None:
        cache = CellTable(cells_for(ids, poi_cells), params)
    return cache.rows(ids, poi_cells)
