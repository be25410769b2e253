"""Independent reference implementations used as test oracles.

Everything in this module is written from first principles (interval
halving, string manipulation, scalar loops, brute-force sorting) and never
imports the production code it is used to check. Slow is fine here.
"""

from __future__ import annotations

import datetime as _dt
import math

import numpy as np

_GEOHASH32 = "0123456789bcdefghjkmnpqrstuvwxyz"


# --- grid hashing oracles ---------------------------------------------------

def geohash_bisect(lat: float, lon: float, length: int = 12) -> str:
    """Classic geohash encoder: repeatedly halve the lon/lat intervals,
    longitude first, emitting one bit per halving, 5 bits per character."""
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    bits = []
    use_lon = True
    while len(bits) < length * 5:
        if use_lon:
            mid = (lon_lo + lon_hi) / 2
            if lon >= mid:
                bits.append(1)
                lon_lo = mid
            else:
                bits.append(0)
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2
            if lat >= mid:
                bits.append(1)
                lat_lo = mid
            else:
                bits.append(0)
                lat_hi = mid
        use_lon = not use_lon
    out = []
    for i in range(length):
        val = 0
        for b in bits[5 * i : 5 * i + 5]:
            val = 2 * val + b
        out.append(_GEOHASH32[val])
    return "".join(out)


def interleave_msb_strings(x_idx: int, y_idx: int, bits: int = 30) -> int:
    """Interleaving via binary strings: write both indices MSB-first and
    alternate characters, x (longitude) first."""
    xs = format(x_idx, f"0{bits}b")
    ys = format(y_idx, f"0{bits}b")
    return int("".join(a + b for a, b in zip(xs, ys)), 2)


def leading_common_groups(za: int, zb: int, groups: int = 12, group_bits: int = 5) -> int:
    """How many leading 5-bit groups of two Z-order integers agree."""
    n = 0
    for g in range(groups):
        shift = group_bits * (groups - 1 - g)
        if (za >> shift) == (zb >> shift):
            n = g + 1
        else:
            break
    return n


# --- calendar oracle --------------------------------------------------------

def day_index_civil(iso_timestamp: str) -> int:
    """Days since 1970-01-01 of the UTC calendar date of an ISO timestamp,
    computed with date arithmetic rather than integer division."""
    text = iso_timestamp.replace("Z", "+00:00")
    dt = _dt.datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=_dt.timezone.utc)
    d = dt.astimezone(_dt.timezone.utc).date()
    return d.toordinal() - _dt.date(1970, 1, 1).toordinal()


def window_naive(items, days, max_len: int):
    """Shift-by-one windowing via plain python lists: pair every visit with
    its successor, keep the last max_len pairs, left-pad with 0 / -1."""
    pairs = [
        (int(items[i]), int(items[i + 1]), int(days[i]))
        for i in range(len(items) - 1)
    ]
    pairs = pairs[-max_len:]
    pad = max_len - len(pairs)
    inputs = [0] * pad + [p[0] for p in pairs]
    targets = [0] * pad + [p[1] for p in pairs]
    in_days = [-1] * pad + [p[2] for p in pairs]
    mask = [False] * pad + [True] * len(pairs)
    return inputs, targets, in_days, mask


# --- numerical differentiation ----------------------------------------------

def central_difference_grad(fn, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one array.

    fn takes no arguments and reads `array` by reference; entries are
    perturbed in place and restored.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn()
        flat[i] = orig - h
        f_minus = fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# --- ranking oracles ----------------------------------------------------------

def rank_by_sorting(scores, candidate_ids, target_id) -> int:
    """1-based rank of the target after sorting by (-score, id)."""
    order = sorted(zip(scores, candidate_ids), key=lambda sc: (-sc[0], sc[1]))
    for pos, (_, cid) in enumerate(order, start=1):
        if cid == target_id:
            return pos
    raise ValueError("target not among candidates")


def dcg_style_gain(rank: int) -> float:
    return 1.0 / math.log2(rank + 1.0)


# --- scalar-loop LSTM ---------------------------------------------------------

def _sig(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def lstm_unrolled(xs: np.ndarray, weights: dict) -> np.ndarray:
    """Run one LSTM direction over a sequence with explicit scalar math.

    xs: (T, d_in). weights holds wi/ui/bi, wf/uf/bf, wo/uo/bo, wg/ug/bg with
    w*: (d_in, H), u*: (H, H), b*: (H,). Returns the final hidden state (H,).
    """
    H = weights["bi"].shape[0]
    h = np.zeros(H)
    c = np.zeros(H)
    for t in range(xs.shape[0]):
        x = xs[t]
        pre_i = x @ weights["wi"] + h @ weights["ui"] + weights["bi"]
        pre_f = x @ weights["wf"] + h @ weights["uf"] + weights["bf"]
        pre_o = x @ weights["wo"] + h @ weights["uo"] + weights["bo"]
        pre_g = x @ weights["wg"] + h @ weights["ug"] + weights["bg"]
        i_gate = np.array([_sig(v) for v in pre_i])
        f_gate = np.array([_sig(v) for v in pre_f])
        o_gate = np.array([_sig(v) for v in pre_o])
        g_gate = np.array([math.tanh(v) for v in pre_g])
        c = f_gate * c + i_gate * g_gate
        h = o_gate * np.array([math.tanh(v) for v in c])
    return h


# --- attention oracles --------------------------------------------------------

def masked_softmax_rows_naive(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over unmasked entries only; fully masked rows become zero."""
    out = np.zeros_like(logits, dtype=np.float64)
    for i in range(logits.shape[0]):
        idx = np.where(mask[i])[0]
        if idx.size == 0:
            continue
        row = logits[i, idx]
        row = np.exp(row - row.max())
        out[i, idx] = row / row.sum()
    return out


def rel_attention_naive(
    x: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    ak_table,
    av_table,
    rel_idx,
    mask: np.ndarray,
    num_heads: int,
) -> np.ndarray:
    """Self-attention with optional relative-position key/value tables,
    written as explicit per-head loops over query/key pairs.

    ak_table/av_table: (num_buckets, d_head) or None. rel_idx: (L, L) int
    bucket indices (ignored when the tables are None).
    """
    L, d = x.shape
    dh = d // num_heads
    q_all = x @ wq
    k_all = x @ wk
    v_all = x @ wv
    out = np.zeros((L, d))
    for head in range(num_heads):
        cols = slice(head * dh, (head + 1) * dh)
        q, k, v = q_all[:, cols], k_all[:, cols], v_all[:, cols]
        logits = np.full((L, L), -np.inf)
        for i in range(L):
            for j in range(L):
                if not mask[i, j]:
                    continue
                kj = k[j].copy()
                if ak_table is not None:
                    kj = kj + ak_table[rel_idx[i, j]]
                logits[i, j] = float(q[i] @ kj) / math.sqrt(dh)
        for i in range(L):
            idx = np.where(mask[i])[0]
            if idx.size == 0:
                continue
            row = logits[i, idx]
            alpha = np.exp(row - row.max())
            alpha = alpha / alpha.sum()
            acc = np.zeros(dh)
            for a, j in zip(alpha, idx):
                vj = v[j].copy()
                if av_table is not None:
                    vj = vj + av_table[rel_idx[i, j]]
                acc += a * vj
            out[i, cols] = acc
    return out


def layer_norm_naive(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        row = x[i]
        mu = row.mean()
        var = ((row - mu) ** 2).mean()
        out[i] = gain * (row - mu) / math.sqrt(var + eps) + bias
    return out


def sasrec_forward_naive(full_table: np.ndarray, abs_pos: np.ndarray,
                         layers: list, ids: np.ndarray, num_heads: int = 1) -> np.ndarray:
    """Plain self-attentive sequence recommender, written straight from the
    equations with numpy: item embedding + absolute position, then per block
    pre-norm causal attention and a pointwise feed-forward, each with a
    residual connection. No spatial or temporal terms anywhere.

    layers: list of dicts of plain arrays with keys wq, wk, wv, w1, w2,
    b1, b2, ln1.g, ln1.b, ln2.g, ln2.b.
    """
    ids = np.asarray(ids)
    L = ids.shape[0]
    valid = ids != 0
    mask = np.tril(np.ones((L, L), dtype=bool)) & valid[None, :]
    x = full_table[ids] + abs_pos
    for layer in layers:
        normed = layer_norm_naive(x, layer["ln1.g"], layer["ln1.b"])
        s = rel_attention_naive(normed, layer["wq"], layer["wk"], layer["wv"],
                                None, None, None, mask, num_heads)
        x = x + s
        normed = layer_norm_naive(x, layer["ln2.g"], layer["ln2.b"])
        hidden = np.maximum(normed @ layer["w1"] + layer["b1"], 0.0)
        x = x + hidden @ layer["w2"] + layer["b2"]
    return x


# --- training-objective oracle --------------------------------------------------

def bce_reference(pos_scores, neg_scores, mask, tables=(), l2: float = 0.0) -> float:
    """Scalar-loop negative-sampling cross-entropy with clamped logs plus an
    L2 penalty over the given plain arrays."""
    total = 0.0
    for p, n, m in zip(pos_scores, neg_scores, mask):
        if not m:
            continue
        total -= math.log(max(_sig(float(p)), 1e-12))
        total -= math.log(max(1.0 - _sig(float(n)), 1e-12))
    for table in tables:
        total += l2 * float(np.sum(np.asarray(table, dtype=np.float64) ** 2))
    return total


def chi_square_statistic(counts, expected) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    return float(np.sum((counts - expected) ** 2 / expected))
