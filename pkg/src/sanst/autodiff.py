"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tape records operations in execution order while it is active; backward()
replays the records in exact reverse order, accumulating adjoints with +=.
With no tape active the same ops run as plain forward computations, which is
the no-gradient fast path used for evaluation and recommendation.

Also home to the Adam optimizer state and the binary array container used
for checkpoints, since both work directly on the tensors defined here.
"""

from __future__ import annotations

import struct
import threading

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeMismatch", "backward",
    "matmul", "transpose", "add", "add_bias", "mul", "scale",
    "relu", "sigmoid", "tanh", "log",
    "softmax_rows", "layer_norm", "dropout", "embedding_lookup",
    "concat_cols", "vstack", "slice_cols", "rowwise_dot", "sum_all",
    "rel_logits", "rel_values",
    "AdamState", "adam_step",
    "save_arrays", "load_arrays",
]


class ShapeMismatch(ValueError):
    """Raised when operand shapes don't satisfy an op's contract."""


class Tensor:
    """A dense float64 array plus an adjoint slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_ACTIVE = threading.local()


def _tape_stack():
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


class Tape:
    """Execution-order record of ops, replayed backward exactly once.

    Single-threaded by construction: the active tape is thread-local, so
    independent tapes may run on independent threads without sharing state.
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape exit out of order"
        return False

    @staticmethod
    def current():
        stack = _tape_stack()
        return stack[-1] if stack else None


def _apply(out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap an op result; record it if a tape is active and any input needs
    gradients. backward_fn(g) must accumulate into the inputs' .grad."""
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        tape._records.append((out, inputs, backward_fn))
        return out
    return Tensor(out_data)


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad += g


def backward(loss: Tensor, tape: Tape | None = None):
    """Accumulate d(loss)/d(tensor) into .grad for every tensor the tape saw.

    Grads of all participating tensors are zeroed first, then the records
    are replayed newest-first with += accumulation, so shared subexpressions
    and repeated parameter uses sum correctly. A tape can be consumed once.
    """
    if tape is None:
        tape = Tape.current()
    if tape is None:
        raise RuntimeError("backward() needs an active or explicit tape")
    if tape._consumed:
        raise RuntimeError("backward() already ran on this tape")
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward() needs a scalar loss, got shape {loss.shape}")

    produced = {id(out) for out, _, _ in tape._records}
    if id(loss) not in produced:
        raise ValueError("loss tensor was not produced on this tape")

    seen = set()
    for out, inputs, _ in tape._records:
        for t in (out, *inputs):
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                t.grad = np.zeros_like(t.data)

    loss.grad = np.ones_like(loss.data)
    for out, _, fn in reversed(tape._records):
        fn(out.grad)
    tape._consumed = True


# --- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul needs (m,k)x(k,n), got {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _apply(out_data, (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch(f"transpose needs a matrix, got {x.shape}")

    def bwd(g):
        _accum(x, g.T)

    return _apply(x.data.T, (x,), bwd)


# --- elementwise -------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, name: str):
    if a.shape == b.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeMismatch(f"{name} needs equal shapes or a scalar operand, got {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # Undo scalar broadcast: collapse the adjoint back to the operand shape.
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(g, b.shape))

    return _apply(out_data, (a, b), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias row to every row of an (m, n) matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias needs (m,n) and (n,), got {x.shape} and {b.shape}")
    out_data = x.data + b.data[None, :]

    def bwd(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _apply(out_data, (x, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _reduce_to(g * b.data, a.shape))
        _accum(b, _reduce_to(g * a.data, b.shape))

    return _apply(out_data, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        _accum(x, g * s)

    return _apply(x.data * s, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def bwd(g):
        _accum(x, g * (x.data > 0.0))

    return _apply(out_data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(x, g * out_data * (1.0 - out_data))

    return _apply(out_data, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def bwd(g):
        _accum(x, g * (1.0 - out_data * out_data))

    return _apply(out_data, (x,), bwd)


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the argument clamped to at least `floor`."""
    clamped = np.maximum(x.data, floor)
    out_data = np.log(clamped)

    def bwd(g):
        # Below the clamp the function is constant in x, so no gradient.
        _accum(x, g * np.where(x.data >= floor, 1.0 / clamped, 0.0))

    return _apply(out_data, (x,), bwd)


# --- structured ops ----------------------------------------------------------

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax over the entries where mask is True.

    Masked entries get probability exactly 0; a fully masked row becomes a
    zero row rather than NaN.
    """
    d = x.data
    if d.ndim != 2:
        raise ShapeMismatch(f"softmax_rows needs a matrix, got {x.shape}")
    if mask is None:
        m = np.ones(d.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != d.shape:
            raise ShapeMismatch(f"mask shape {m.shape} does not match input {x.shape}")

    neg_inf = np.where(m, d, -np.inf)
    row_max = neg_inf.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.zeros_like(d)
    np.exp(d - row_max, out=e, where=m)
    denom = e.sum(axis=1, keepdims=True)
    out_data = e / np.where(denom == 0.0, 1.0, denom)

    def bwd(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accum(x, out_data * (g - dot))

    return _apply(out_data, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    d = x.data
    if d.ndim != 2:
        raise ShapeMismatch(f"layer_norm needs a matrix, got {x.shape}")
    if gain.shape != (d.shape[1],) or bias.shape != (d.shape[1],):
        raise ShapeMismatch(
            f"layer_norm gain/bias must be ({d.shape[1]},), got {gain.shape} and {bias.shape}")
    mu = d.mean(axis=1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data[None, :] + bias.data[None, :]

    def bwd(g):
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))
        dxhat = g * gain.data[None, :]
        term = dxhat - dxhat.mean(axis=1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        _accum(x, inv * term)

    return _apply(out_data, (x, gain, bias), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: at train time zero entries with probability `rate`
    and scale survivors by 1/(1-rate); at eval time the identity."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate!r}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    factor = keep / (1.0 - rate)
    out_data = x.data * factor

    def bwd(g):
        _accum(x, g * factor)

    return _apply(out_data, (x,), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows `ids` of a (V, d) table; backward scatter-adds."""
    idx = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embedding_lookup needs a matrix table, got {table.shape}")
    if idx.ndim != 1:
        raise ShapeMismatch(f"embedding_lookup needs 1-D ids, got shape {idx.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"embedding_lookup ids must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"embedding ids out of range [0, {table.shape[0]}): min={idx.min()}, max={idx.max()}")
    out_data = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            np.add.at(table.grad, idx, g)

    return _apply(out_data, (table,), bwd)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"concat_cols needs matching row counts, got {a.shape} and {b.shape}")
    na = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        _accum(a, g[:, :na])
        _accum(b, g[:, na:])

    return _apply(out_data, (a, b), bwd)


def vstack(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"vstack needs matching column counts, got {a.shape} and {b.shape}")
    ma = a.shape[0]
    out_data = np.concatenate([a.data, b.data], axis=0)

    def bwd(g):
        _accum(a, g[:ma])
        _accum(b, g[ma:])

    return _apply(out_data, (a, b), bwd)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo <= hi <= x.shape[1]):
        raise ShapeMismatch(f"slice_cols [{lo}:{hi}] invalid for shape {x.shape}")
    out_data = x.data[:, lo:hi]

    def bwd(g):
        if x.requires_grad:
            x.grad[:, lo:hi] += g

    return _apply(out_data, (x,), bwd)


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product of two equal-shape matrices, yielding (m,)."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeMismatch(f"rowwise_dot needs equal matrices, got {a.shape} and {b.shape}")
    out_data = np.einsum("ij,ij->i", a.data, b.data)

    def bwd(g):
        _accum(a, g[:, None] * b.data)
        _accum(b, g[:, None] * a.data)

    return _apply(out_data, (a, b), bwd)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum())

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.shape).copy() if x.shape else np.asarray(g))

    return _apply(out_data, (x,), bwd)


# --- relative-position attention helpers --------------------------------------

def rel_logits(q: Tensor, table: Tensor, idx: np.ndarray) -> Tensor:
    """out[i, j] = q[i] . table[idx[i, j]].

    q: (L, d_head), table: (B, d_head), idx: (L, L) integer bucket indices.
    The gathered table rows are recomputed in backward instead of stored;
    that is valid because parameters only change after backward completes.
    """
    idx = np.asarray(idx)
    if q.data.ndim != 2 or table.data.ndim != 2 or q.shape[1] != table.shape[1]:
        raise ShapeMismatch(f"rel_logits needs (L,d) and (B,d), got {q.shape} and {table.shape}")
    if idx.shape != (q.shape[0], q.shape[0]):
        raise ShapeMismatch(f"rel_logits idx must be (L,L), got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"relative bucket index out of range [0, {table.shape[0]})")
    gathered = table.data[idx]
    out_data = np.einsum("id,ijd->ij", q.data, gathered)

    def bwd(g):
        rows = table.data[idx]
        _accum(q, np.einsum("ij,ijd->id", g, rows))
        if table.requires_grad:
            np.add.at(table.grad, idx, g[:, :, None] * q.data[:, None, :])

    return _apply(out_data, (q, table), bwd)


def rel_values(alpha: Tensor, table: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = sum_j alpha[i, j] * table[idx[i, j]].

    alpha: (L, L) attention weights, table: (B, d_head), idx: (L, L).
    """
    idx = np.asarray(idx)
    if alpha.data.ndim != 2 or alpha.shape[0] != alpha.shape[1]:
        raise ShapeMismatch(f"rel_values needs square weights, got {alpha.shape}")
    if idx.shape != alpha.shape:
        raise ShapeMismatch(f"rel_values idx must match weights, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"relative bucket index out of range [0, {table.shape[0]})")
    gathered = table.data[idx]
    out_data = np.einsum("ij,ijd->id", alpha.data, gathered)

    def bwd(g):
        rows = table.data[idx]
        _accum(alpha, np.einsum("id,ijd->ij", g, rows))
        if table.requires_grad:
            np.add.at(table.grad, idx, alpha.data[:, :, None] * g[:, None, :])

    return _apply(out_data, (alpha, table), bwd)


# --- optimizer -----------------------------------------------------------------

class AdamState:
    """Adam moment estimates for a named parameter collection."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    b1c = 1.0 - state.beta1 ** t
    b2c = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, want {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)


# --- binary array container ------------------------------------------------------

_MAGIC = b"SANSTCKPT"
_VERSION = 1


def save_arrays(path, arrays: dict):
    """Write named float64 arrays to a deterministic binary container.

    Layout: magic, version, entry count, then per entry the UTF-8 name,
    the shape, and the row-major little-endian float64 payload. Identical
    inputs produce identical bytes.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_arrays(path) -> dict:
    """Read a container written by save_arrays, preserving entry order."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    off = len(_MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out[name] = arr.astype(np.float64)
    if off != len(blob):
        raise ValueError(f"trailing bytes in checkpoint: {path}")
    return out
