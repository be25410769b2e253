"""The sequence model: concatenated id+spatial input embeddings, stacked
self-attention layers with relative-day key/value offsets, dot-product
scoring, and top-K recommendation.

Attention is causal over the windowed sequence: position i sees positions
j <= i that hold real visits. The relative-day tables are shared across
layers and heads; with `use_temporal` off they drop out of the logits and
the layer reduces to plain scaled dot-product attention. With `use_spatial`
off the cell-code embedding is replaced by a second learned id-table slice
of the same width, so the model dimension is unchanged across ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from . import autodiff as ad
from .ingest import PAD_ID, eval_window
from .spatial import CellTable, SpatialParams, cells_for


@dataclass
class ModelConfig:
    d_id: int = 50          # POI id embedding width
    d_s: int = 20           # cell-code character embedding width
    h_s: int = 25           # LSTM hidden width per direction
    max_len: int = 100      # attention window length
    num_layers: int = 2     # stacked attention blocks
    num_heads: int = 1
    k: int = 3              # relative-day clip radius
    dropout: float = 0.3
    use_abs_pos: bool = True
    use_spatial: bool = True
    use_temporal: bool = True

    @property
    def d_es(self) -> int:
        return 2 * self.h_s

    @property
    def d(self) -> int:
        return self.d_id + self.d_es

    @property
    def d_head(self) -> int:
        return self.d // self.num_heads

    def __post_init__(self):
        if self.d_id < 1 or self.d_s < 1 or self.h_s < 1:
            raise ValueError("embedding widths must be positive")
        if self.max_len < 1:
            raise ValueError(f"max_len must be positive, got {self.max_len}")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be at least 1, got {self.num_layers}")
        if self.k < 0:
            raise ValueError(f"k must be nonnegative, got {self.k}")
        if self.num_heads < 1 or self.d % self.num_heads != 0:
            raise ValueError(
                f"model width {self.d} not divisible by {self.num_heads} heads")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


_LAYER_SLOTS = ("wq", "wk", "wv", "w1", "w2", "b1", "b2", "ln1.g", "ln1.b", "ln2.g", "ln2.b")


class ModelParams:
    """All learnable tensors, addressable by stable checkpoint names.

    Construction draws from `rng` in a fixed order, so one seed pins every
    initial value; rng=None builds zero-filled tensors for checkpoint loads.
    """

    def __init__(self, config: ModelConfig, num_pois: int, rng: np.random.Generator | None):
        if num_pois < 1:
            raise ValueError(f"need at least one POI, got {num_pois}")
        self.config = config
        self.num_pois = num_pois
        d = config.d

        def table(*shape):
            if rng is None:
                return np.zeros(shape)
            return rng.uniform(-0.05, 0.05, size=shape)

        def xavier(n_in, n_out):
            if rng is None:
                return np.zeros((n_in, n_out))
            lim = math.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, size=(n_in, n_out))

        id_rows = table(num_pois + 1, config.d_id)
        id_rows[0] = 0.0  # padding row pinned to zero
        self.poi_id_table = ad.Tensor(id_rows, requires_grad=True)
        self.abs_pos_table = ad.Tensor(table(config.max_len, d), requires_grad=True)

        self.layers = []
        for _ in range(config.num_layers):
            layer = {
                "wq": ad.Tensor(xavier(d, d), requires_grad=True),
                "wk": ad.Tensor(xavier(d, d), requires_grad=True),
                "wv": ad.Tensor(xavier(d, d), requires_grad=True),
                "w1": ad.Tensor(xavier(d, d), requires_grad=True),
                "w2": ad.Tensor(xavier(d, d), requires_grad=True),
                "b1": ad.Tensor(np.zeros(d), requires_grad=True),
                "b2": ad.Tensor(np.zeros(d), requires_grad=True),
                "ln1.g": ad.Tensor(np.ones(d), requires_grad=True),
                "ln1.b": ad.Tensor(np.zeros(d), requires_grad=True),
                "ln2.g": ad.Tensor(np.ones(d), requires_grad=True),
                "ln2.b": ad.Tensor(np.zeros(d), requires_grad=True),
            }
            self.layers.append(layer)

        buckets = 2 * config.k + 1
        self.rel_wk = ad.Tensor(table(buckets, config.d_head), requires_grad=True)
        self.rel_wv = ad.Tensor(table(buckets, config.d_head), requires_grad=True)

        if config.use_spatial:
            self.spatial = SpatialParams(config.d_s, config.h_s, rng)
            self.poi_id_table_aux = None
        else:
            aux = table(num_pois + 1, config.d_es)
            aux[0] = 0.0
            self.poi_id_table_aux = ad.Tensor(aux, requires_grad=True)
            self.spatial = None

    def named(self) -> dict:
        """Checkpoint-ordered name -> Tensor mapping."""
        out = {"poi_id_table": self.poi_id_table, "abs_pos": self.abs_pos_table}
        for t, layer in enumerate(self.layers):
            for slot in _LAYER_SLOTS:
                out[f"layer{t}.{slot}"] = layer[slot]
        out["rel_wk"] = self.rel_wk
        out["rel_wv"] = self.rel_wv
        if self.spatial is not None:
            out.update(self.spatial.named())
        else:
            out["poi_id_table_aux"] = self.poi_id_table_aux
        return out


# --- config sidecar -----------------------------------------------------------

def config_to_text(config: ModelConfig, num_pois: int) -> str:
    """Plain key=value rendering of a model config plus the catalog size."""
    lines = [f"num_pois={num_pois}"]
    for f in dataclass_fields(ModelConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> tuple:
    """Inverse of config_to_text. Unknown keys are rejected."""
    known = {f.name: f.type for f in dataclass_fields(ModelConfig)}
    kwargs = {}
    num_pois = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key == "num_pois":
            num_pois = int(value)
        elif key in known:
            kwargs[key] = _parse_config_value(key, value)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    if num_pois is None:
        raise ValueError("config missing num_pois")
    return ModelConfig(**kwargs), num_pois


def _parse_config_value(key: str, value: str):
    if key == "dropout":
        return float(value)
    if key.startswith("use_"):
        if value not in ("true", "false"):
            raise ValueError(f"config key {key!r} must be true or false, got {value!r}")
        return value == "true"
    return int(value)


def save_params(path, params: ModelParams):
    """Write the parameter checkpoint and its key=value config sidecar."""
    ad.save_arrays(path, {name: t.data for name, t in params.named().items()})
    with open(f"{path}.cfg", "w", encoding="utf-8") as fh:
        fh.write(config_to_text(params.config, params.num_pois))


def load_params(path) -> ModelParams:
    """Rebuild ModelParams from a checkpoint written by save_params."""
    with open(f"{path}.cfg", "r", encoding="utf-8") as fh:
        config, num_pois = config_from_text(fh.read())
    arrays = ad.load_arrays(path)
    params = ModelParams(config, num_pois, rng=None)
    assign_arrays(params, arrays)
    return params


def assign_arrays(params: ModelParams, arrays: dict, prefix: str = ""):
    """Copy checkpoint arrays into parameter tensors, enforcing exact name
    and shape agreement."""
    named = params.named()
    want = {prefix + name for name in named}
    have = {k for k in arrays if k in want}
    missing = sorted(want - have)
    if missing:
        raise ValueError(f"checkpoint missing entries: {missing[:5]}")
    for name, tensor in named.items():
        arr = arrays[prefix + name]
        if arr.shape != tensor.data.shape:
            raise ValueError(
                f"checkpoint entry {name!r} has shape {arr.shape}, want {tensor.data.shape}")
        tensor.data = np.ascontiguousarray(arr, dtype=np.float64)


# --- temporal indexing ----------------------------------------------------------

def temporal_labels(input_days, t_q: int) -> np.ndarray:
    """T_i = t_q - day_i: whole days between each visit and the query date."""
    return np.asarray(t_q, dtype=np.int64) - np.asarray(input_days, dtype=np.int64)


def relative_index(t_i: int, t_j: int, k: int) -> int:
    """Bucket index of the clipped label difference: clip(T_j - T_i, k) + k,
    an integer in [0, 2k]."""
    diff = int(t_j) - int(t_i)
    return max(-k, min(k, diff)) + k


def build_rel_index(input_days, t_q: int, k: int, valid: np.ndarray) -> np.ndarray:
    """Pairwise bucket matrix for a windowed sequence.

    Entry (i, j) is relative_index(T_i, T_j, k). Positions without a real
    visit get the center bucket; attention never reads them anyway.
    """
    labels = temporal_labels(input_days, t_q)
    diff = labels[None, :] - labels[:, None]
    idx = np.clip(diff, -k, k) + k
    idx[~valid, :] = k
    idx[:, ~valid] = k
    return idx.astype(np.int64)


# --- network pieces --------------------------------------------------------------

def embed_candidates(params: ModelParams, poi_ids, poi_cells,
                     cell_table: CellTable | None = None) -> ad.Tensor:
    """Candidate embedding rows: id slice next to the spatial (or aux) slice.
    No positional term and no dropout; this is what scoring dots against."""
    ids = np.asarray(poi_ids, dtype=np.int64)
    e = ad.embedding_lookup(params.poi_id_table, ids)
    if params.config.use_spatial:
        if cell_table is None:
            cell_table = CellTable(cells_for(ids, poi_cells), params.spatial)
        es = cell_table.rows(ids, poi_cells)
    else:
        es = ad.embedding_lookup(params.poi_id_table_aux, ids)
    return ad.concat_cols(e, es)


def embed_inputs(params: ModelParams, input_ids, poi_cells,
                 cell_table: CellTable | None = None,
                 training: bool = False, rng: np.random.Generator | None = None) -> ad.Tensor:
    """Windowed input rows: candidate embedding plus absolute position,
    with dropout at train time. Padding rows are zero before the positional
    term is added."""
    cfg = params.config
    ids = np.asarray(input_ids, dtype=np.int64)
    if ids.shape != (cfg.max_len,):
        raise ad.ShapeMismatch(f"input ids must be ({cfg.max_len},), got {ids.shape}")
    x = embed_candidates(params, ids, poi_cells, cell_table)
    if cfg.use_abs_pos:
        x = ad.add(x, params.abs_pos_table)
    if training and cfg.dropout > 0.0:
        if rng is None:
            raise ValueError("training-time embed_inputs needs an rng for dropout")
        x = ad.dropout(x, cfg.dropout, rng, training=True)
    return x


def rel_self_attention(x: ad.Tensor, rel_idx: np.ndarray | None, mask: np.ndarray,
                       layer: dict, params: ModelParams) -> ad.Tensor:
    """One attention sublayer over all heads.

    Per head: logits_ij = q_i (k_j + a^K[rel_idx_ij]) / sqrt(d_head), masked
    softmax over j <= i, then values plus a^V offsets, heads concatenated.
    """
    cfg = params.config
    dh = cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    q_all = ad.matmul(x, layer["wq"])
    k_all = ad.matmul(x, layer["wk"])
    v_all = ad.matmul(x, layer["wv"])
    head_outs = []
    for head in range(cfg.num_heads):
        lo, hi = head * dh, (head + 1) * dh
        if cfg.num_heads == 1:
            q, k, v = q_all, k_all, v_all
        else:
            q = ad.slice_cols(q_all, lo, hi)
            k = ad.slice_cols(k_all, lo, hi)
            v = ad.slice_cols(v_all, lo, hi)
        logits = ad.matmul(q, ad.transpose(k))
        if cfg.use_temporal:
            logits = ad.add(logits, ad.rel_logits(q, params.rel_wk, rel_idx))
        alpha = ad.softmax_rows(ad.scale(logits, scale), mask)
        out = ad.matmul(alpha, v)
        if cfg.use_temporal:
            out = ad.add(out, ad.rel_values(alpha, params.rel_wv, rel_idx))
        head_outs.append(out)
    s = head_outs[0]
    for part in head_outs[1:]:
        s = ad.concat_cols(s, part)
    return s


def ffn(s: ad.Tensor, layer: dict) -> ad.Tensor:
    """Position-wise feed-forward: ReLU(s W1 + b1) W2 + b2."""
    hidden = ad.relu(ad.add_bias(ad.matmul(s, layer["w1"]), layer["b1"]))
    return ad.add_bias(ad.matmul(hidden, layer["w2"]), layer["b2"])


def attention_mask(input_ids) -> np.ndarray:
    """mask[i, j]: may position i attend to position j? Requires j <= i and
    a real (non-padding) visit at j."""
    ids = np.asarray(input_ids)
    valid = ids != PAD_ID
    causal = np.tril(np.ones((ids.shape[0], ids.shape[0]), dtype=bool))
    return causal & valid[None, :]


def forward(params: ModelParams, input_ids, input_days, t_q: int, poi_cells,
            cell_table: CellTable | None = None,
            training: bool = False, rng: np.random.Generator | None = None) -> ad.Tensor:
    """Full network pass over one windowed sequence; returns F*: (max_len, d).

    Each block applies layer_norm -> attention -> dropout -> residual, then
    layer_norm -> ffn -> dropout -> residual.
    """
    cfg = params.config
    ids = np.asarray(input_ids, dtype=np.int64)
    mask = attention_mask(ids)
    rel_idx = None
    if cfg.use_temporal:
        rel_idx = build_rel_index(input_days, t_q, cfg.k, ids != PAD_ID)

    def drop(t):
        if training and cfg.dropout > 0.0:
            return ad.dropout(t, cfg.dropout, rng, training=True)
        return t

    x = embed_inputs(params, ids, poi_cells, cell_table, training=training, rng=rng)
    for layer in params.layers:
        normed = ad.layer_norm(x, layer["ln1.g"], layer["ln1.b"])
        x = ad.add(x, drop(rel_self_attention(normed, rel_idx, mask, layer, params)))
        normed = ad.layer_norm(x, layer["ln2.g"], layer["ln2.b"])
        x = ad.add(x, drop(ffn(normed, layer)))
    return x


def score_positions(f_star: ad.Tensor, candidates: ad.Tensor) -> ad.Tensor:
    """Per-position relevance: row i of f_star dotted with row i of the
    candidate embedding matrix. Used by the training objective."""
    return ad.rowwise_dot(f_star, candidates)


def score_candidates(f_row: np.ndarray, candidate_matrix: np.ndarray) -> np.ndarray:
    """Relevance of many candidates against one sequence state."""
    return candidate_matrix @ np.asarray(f_row, dtype=np.float64)


def rank_candidates(scores: np.ndarray, candidate_ids: np.ndarray) -> np.ndarray:
    """Candidate ids ordered by descending score, ties broken by ascending id."""
    scores = np.asarray(scores)
    candidate_ids = np.asarray(candidate_ids)
    order = np.lexsort((candidate_ids, -scores))
    return candidate_ids[order]


def candidate_pool(num_pois: int, history_items, policy: str) -> np.ndarray:
    """Dense candidate ids under a policy: 'full' is the whole catalog,
    'exclude-train' removes the user's own visited POIs."""
    all_ids = np.arange(1, num_pois + 1, dtype=np.int64)
    if policy == "full":
        return all_ids
    if policy == "exclude-train":
        visited = set(int(p) for p in np.asarray(history_items).reshape(-1))
        return np.array([p for p in all_ids if int(p) not in visited], dtype=np.int64)
    raise ValueError(f"unknown candidate policy: {policy!r}")


def recommend(params: ModelParams, poi_cells, history_items, history_days,
              t_q: int, top_k: int, policy: str = "exclude-train") -> list:
    """Top-K next-POI suggestions after a visit history.

    Returns (dense_poi_id, score) pairs, best first; ties favor the lower
    id. The history must contain at least one visit.
    """
    items = np.asarray(history_items, dtype=np.int64)
    days = np.asarray(history_days, dtype=np.int64)
    if items.size == 0:
        raise ValueError("recommend needs a non-empty visit history")
    if top_k < 1:
        raise ValueError(f"top_k must be positive, got {top_k}")
    cfg = params.config
    input_ids, input_days, last = eval_window(items, days, cfg.max_len)
    cands = candidate_pool(params.num_pois, items, policy)
    if cands.size == 0:
        raise ValueError("candidate pool is empty under this policy")

    cell_table = None
    if cfg.use_spatial:
        needed = np.concatenate([input_ids, cands])
        cell_table = CellTable(cells_for(needed, poi_cells), params.spatial)
    f_star = forward(params, input_ids, input_days, t_q, poi_cells, cell_table)
    f_last = f_star.data[last]
    cand_matrix = embed_candidates(params, cands, poi_cells, cell_table).data
    scores = score_candidates(f_last, cand_matrix)
    order = np.lexsort((cands, -scores))[: min(top_k, cands.size)]
    return [(int(cands[i]), float(scores[i])) for i in order]
