"""Training loop: per-step negative sampling, masked binary cross-entropy
with L2 on the embedding tables, Adam, and seeded epoch streams.

Every source of randomness in an epoch (shuffle order, negative draws,
dropout masks) comes from one generator derived from (seed, epoch), so a
run can be interrupted at a checkpoint and resumed bit-for-bit, and two
runs with the same seed produce identical checkpoints and logs.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .evaluation import EvalReport, evaluate
from .ingest import window
from .model import (
    ModelConfig,
    ModelParams,
    assign_arrays,
    config_to_text,
    embed_candidates,
    forward,
    load_params,
    save_params,
    score_positions,
)
from .spatial import CellTable, cells_for

log = logging.getLogger(__name__)

_INIT_STREAM = 0  # epoch streams start at 1, so 0 is free for the init draw


@dataclass
class TrainConfig:
    lr: float = 0.005
    l2: float = 0.001
    batch_size: int = 128
    epochs: int = 200
    seed: int = 42
    eval_every: int = 20
    eval_k: int = 10
    candidate_policy: str = "exclude-train"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be nonnegative, got {self.l2}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be at least 1, got {self.eval_every}")
        if self.eval_k < 1:
            raise ValueError(f"eval_k must be at least 1, got {self.eval_k}")


@dataclass
class Batch:
    """Stacked training windows for a group of users."""

    inputs: np.ndarray    # (B, max_len) int64
    targets: np.ndarray   # (B, max_len) int64
    days: np.ndarray      # (B, max_len) int64
    masks: np.ndarray     # (B, max_len) bool
    histories: list       # per-user set of training POI ids
    query_days: np.ndarray  # per-user t_q stand-in (cancels in attention)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """The sole randomness source for one epoch (epoch 0 = initialization)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, epoch))))


def init_params(model_cfg: ModelConfig, num_pois: int, seed: int) -> ModelParams:
    return ModelParams(model_cfg, num_pois, epoch_rng(seed, _INIT_STREAM))


def sample_negative(rng: np.random.Generator, num_pois: int, history) -> int:
    """Uniform draw over the POIs the user never visited in training."""
    history = history if isinstance(history, (set, frozenset)) else set(map(int, history))
    if len(history) >= num_pois:
        raise ValueError("no negative candidates: user visited the whole catalog")
    while True:
        pid = int(rng.integers(1, num_pois + 1))
        if pid not in history:
            return pid


def build_batch(examples, max_len: int) -> Batch:
    b = len(examples)
    inputs = np.empty((b, max_len), dtype=np.int64)
    targets = np.empty((b, max_len), dtype=np.int64)
    days = np.empty((b, max_len), dtype=np.int64)
    masks = np.empty((b, max_len), dtype=bool)
    histories = []
    query_days = np.empty(b, dtype=np.int64)
    for i, ex in enumerate(examples):
        inputs[i], targets[i], days[i], masks[i] = window(
            ex.train_items, ex.train_days, max_len)
        histories.append(frozenset(map(int, ex.train_items)))
        query_days[i] = ex.train_days[-1]
    return Batch(inputs, targets, days, masks, histories, query_days)


def embedding_tables(params: ModelParams) -> dict:
    """The tables the L2 penalty covers: id, positional, relative, and the
    spatial character table (or the aux id slice in the spatial ablation).
    Projection and recurrent weights are deliberately not penalized."""
    tables = {
        "poi_id_table": params.poi_id_table,
        "abs_pos": params.abs_pos_table,
        "rel_wk": params.rel_wk,
        "rel_wv": params.rel_wv,
    }
    if params.spatial is not None:
        tables["char_table"] = params.spatial.char_table
    else:
        tables["poi_id_table_aux"] = params.poi_id_table_aux
    return tables


def l2_penalty(params: ModelParams, l2: float) -> ad.Tensor:
    total = None
    for t in embedding_tables(params).values():
        sq = ad.sum_all(ad.mul(t, t))
        total = sq if total is None else ad.add(total, sq)
    return ad.scale(total, l2)


def bce_loss(pos_scores: ad.Tensor, neg_scores: ad.Tensor, mask,
             params: ModelParams | None = None, l2: float = 0.0) -> ad.Tensor:
    """-sum over valid steps of [log s(r_pos) + log(1 - s(r_neg))], plus the
    L2 penalty on embedding tables when params and l2 are given. Logs are
    clamped at 1e-12."""
    mask_t = ad.Tensor(np.asarray(mask, dtype=np.float64))
    one = ad.Tensor(1.0)
    pos_term = ad.log(ad.sigmoid(pos_scores))
    neg_term = ad.log(ad.add(one, ad.scale(ad.sigmoid(neg_scores), -1.0)))
    per_step = ad.mul(ad.add(pos_term, neg_term), mask_t)
    loss = ad.scale(ad.sum_all(per_step), -1.0)
    if params is not None and l2 > 0.0:
        loss = ad.add(loss, l2_penalty(params, l2))
    return loss


def train_step(params: ModelParams, adam: ad.AdamState, batch: Batch,
               poi_cells, tcfg: TrainConfig, rng: np.random.Generator) -> float:
    """One optimizer step over a batch: summed per-user losses plus one L2
    term, backward, Adam, padding rows re-zeroed. Returns the batch loss."""
    cfg = params.config
    num_users = batch.inputs.shape[0]

    negatives = np.zeros_like(batch.targets)
    for i in range(num_users):
        hist = batch.histories[i]
        for t in np.flatnonzero(batch.masks[i]):
            negatives[i, t] = sample_negative(rng, params.num_pois, hist)

    with ad.Tape() as tape:
        cell_table = None
        if cfg.use_spatial:
            needed = np.concatenate(
                [batch.inputs.reshape(-1), batch.targets.reshape(-1), negatives.reshape(-1)])
            cell_table = CellTable(cells_for(needed, poi_cells), params.spatial)
        total = None
        for i in range(num_users):
            f = forward(params, batch.inputs[i], batch.days[i], int(batch.query_days[i]),
                        poi_cells, cell_table, training=True, rng=rng)
            pos = score_positions(f, embed_candidates(params, batch.targets[i],
                                                      poi_cells, cell_table))
            neg = score_positions(f, embed_candidates(params, negatives[i],
                                                      poi_cells, cell_table))
            user_loss = bce_loss(pos, neg, batch.masks[i])
            total = user_loss if total is None else ad.add(total, user_loss)
        if tcfg.l2 > 0.0:
            total = ad.add(total, l2_penalty(params, tcfg.l2))
        loss_value = float(total.data)
        if not np.isfinite(loss_value):
            raise RuntimeError(
                f"non-finite loss {loss_value} at optimizer step {adam.step + 1}")
        ad.backward(total, tape)

    named = params.named()
    grads = {}
    for name, tensor in named.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        elif not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient for {name!r} at step {adam.step + 1}")
        grads[name] = g
    ad.adam_step(named, grads, adam, tcfg.lr)

    params.poi_id_table.data[0] = 0.0
    if params.poi_id_table_aux is not None:
        params.poi_id_table_aux.data[0] = 0.0
    return loss_value


def train_epoch(split, poi_cells, params: ModelParams, adam: ad.AdamState,
                tcfg: TrainConfig, rng: np.random.Generator) -> float:
    """One pass over all users in a seeded shuffle order. Returns the mean
    loss per user."""
    order = rng.permutation(len(split))
    total_loss = 0.0
    for start in range(0, len(order), tcfg.batch_size):
        chunk = [split[i] for i in order[start : start + tcfg.batch_size]]
        batch = build_batch(chunk, params.config.max_len)
        total_loss += train_step(params, adam, batch, poi_cells, tcfg, rng)
    return total_loss / max(len(split), 1)


# --- fit with checkpointing -----------------------------------------------------

@dataclass
class FitResult:
    params: ModelParams          # best by nDCG@K at eval points
    final_params: ModelParams    # state after the last epoch
    log_lines: list = field(default_factory=list)
    best_ndcg: float = 0.0
    best_epoch: int = 0
    last_report: EvalReport | None = None


def _snapshot(params: ModelParams) -> ModelParams:
    copy = ModelParams(params.config, params.num_pois, rng=None)
    for name, tensor in params.named().items():
        copy.named()[name].data = tensor.data.copy()
    return copy


def save_trainer_state(path, params: ModelParams, adam: ad.AdamState,
                       epoch: int, best_ndcg: float, best_epoch: int):
    """Full resumable state: model tensors, Adam moments, and counters, in
    one container, with the model config sidecar."""
    arrays = {name: t.data for name, t in params.named().items()}
    for name in params.named():
        arrays[f"adam.m.{name}"] = adam.m[name]
        arrays[f"adam.v.{name}"] = adam.v[name]
    arrays["trainer.step"] = np.asarray(float(adam.step))
    arrays["trainer.epoch"] = np.asarray(float(epoch))
    arrays["trainer.best_ndcg"] = np.asarray(best_ndcg)
    arrays["trainer.best_epoch"] = np.asarray(float(best_epoch))
    ad.save_arrays(path, arrays)
    with open(f"{path}.cfg", "w", encoding="utf-8") as fh:
        fh.write(config_to_text(params.config, params.num_pois))


def load_trainer_state(path, params: ModelParams, adam: ad.AdamState) -> tuple:
    """Restore state written by save_trainer_state into existing params and
    optimizer objects. Returns (epoch, best_ndcg, best_epoch)."""
    arrays = ad.load_arrays(path)
    assign_arrays(params, arrays)
    for name in params.named():
        adam.m[name] = np.ascontiguousarray(arrays[f"adam.m.{name}"])
        adam.v[name] = np.ascontiguousarray(arrays[f"adam.v.{name}"])
    def scalar(name):
        return float(arrays[name].reshape(-1)[0])

    adam.step = int(scalar("trainer.step"))
    return (int(scalar("trainer.epoch")), scalar("trainer.best_ndcg"),
            int(scalar("trainer.best_epoch")))


def fit(split, catalog, model_cfg: ModelConfig, tcfg: TrainConfig,
        out_dir=None, resume: bool = False) -> FitResult:
    """Train for tcfg.epochs, evaluating every eval_every epochs (and at the
    final epoch), keeping the parameters with the best nDCG@K.

    With out_dir set, writes `last.ckpt` (resumable state) at every eval
    point, `best.ckpt` whenever the best improves, and appends eval lines
    to `train.log`. resume=True picks up from out_dir/last.ckpt.
    """
    if not split:
        raise ValueError("empty training split")
    num_pois = catalog.num_pois
    poi_cells = catalog.poi_cells
    params = init_params(model_cfg, num_pois, tcfg.seed)
    adam = ad.AdamState(params.named())
    start_epoch = 1
    best_ndcg = -1.0
    best_epoch = 0

    out = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        out = out_dir

    if resume:
        if out is None:
            raise ValueError("resume needs out_dir")
        last = os.path.join(out, "last.ckpt")
        if not os.path.exists(last):
            raise FileNotFoundError(f"no checkpoint to resume from: {last}")
        epoch, best_ndcg, best_epoch = load_trainer_state(last, params, adam)
        start_epoch = epoch + 1
        log.info("resumed at epoch %d (best ndcg %.6f at epoch %d)",
                 epoch, best_ndcg, best_epoch)

    best_params = _snapshot(params) if best_epoch else None
    if resume and best_epoch and out is not None:
        best_path = os.path.join(out, "best.ckpt")
        if os.path.exists(best_path):
            best_params = load_params(best_path)

    log_lines = []
    last_report = None
    log_path = None
    if out is not None:
        log_path = os.path.join(out, "train.log")
        if not resume:
            open(log_path, "w").close()

    for epoch in range(start_epoch, tcfg.epochs + 1):
        rng = epoch_rng(tcfg.seed, epoch)
        mean_loss = train_epoch(split, poi_cells, params, adam, tcfg, rng)
        if epoch % tcfg.eval_every == 0 or epoch == tcfg.epochs:
            report = evaluate(params, catalog, split, k=tcfg.eval_k,
                              policy=tcfg.candidate_policy)
            last_report = report
            line = (f"epoch={epoch} loss={mean_loss:.12g} "
                    f"hit10={report.hit:.12g} ndcg10={report.ndcg:.12g}")
            log_lines.append(line)
            log.info(line)
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            if report.ndcg > best_ndcg:
                best_ndcg = report.ndcg
                best_epoch = epoch
                best_params = _snapshot(params)
                if out is not None:
                    save_params(os.path.join(out, "best.ckpt"), best_params)
            if out is not None:
                save_trainer_state(os.path.join(out, "last.ckpt"), params, adam,
                                   epoch, best_ndcg, best_epoch)

    if best_params is None:
        best_params = params
        best_ndcg = max(best_ndcg, 0.0)
    return FitResult(params=best_params, final_params=params, log_lines=log_lines,
                     best_ndcg=max(best_ndcg, 0.0), best_epoch=best_epoch,
                     last_report=last_report)
