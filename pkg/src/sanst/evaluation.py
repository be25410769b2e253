"""Leave-one-out evaluation: rank the held-out visit among candidates and
aggregate hit@K and nDCG@K over users.

Ranks use the same deterministic tie rule as recommendation: equal scores
are broken by ascending POI id. Evaluation never mutates parameters and
never touches the gradient tape.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ingest import eval_window
from .model import ModelParams, embed_candidates, forward

CANDIDATE_POLICIES = ("exclude-train", "full")


@dataclass
class EvalReport:
    hit: float
    ndcg: float
    ranks: list = field(default_factory=list)
    k: int = 10
    policy: str = "exclude-train"
    num_users: int = 0


def rank_of_target(scores, candidate_ids, target_id: int) -> int:
    """1-based rank of target_id under descending score, ties broken by
    ascending id. Raises if the target is not among the candidates."""
    scores = np.asarray(scores, dtype=np.float64)
    candidate_ids = np.asarray(candidate_ids)
    hits = np.flatnonzero(candidate_ids == target_id)
    if hits.size == 0:
        raise ValueError(f"target {target_id} not among candidates")
    target_score = scores[hits[0]]
    greater = int(np.count_nonzero(scores > target_score))
    tied_lower = int(np.count_nonzero(
        (scores == target_score) & (candidate_ids < target_id)))
    return 1 + greater + tied_lower


def hit_at_k(rank: int, k: int) -> float:
    if rank < 1:
        raise ValueError(f"rank must be at least 1, got {rank}")
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    if rank < 1:
        raise ValueError(f"rank must be at least 1, got {rank}")
    if rank > k:
        return 0.0
    return 1.0 / np.log2(rank + 1.0)


def candidate_ids_for(num_pois: int, train_items, target_id: int, policy: str):
    """Candidate pool for one user. exclude-train drops the user's training
    items but always keeps the held-out target so it stays rankable."""
    if policy not in CANDIDATE_POLICIES:
        raise ValueError(f"unknown candidate policy {policy!r}")
    all_ids = np.arange(1, num_pois + 1, dtype=np.int64)
    if policy == "full":
        return all_ids
    drop = np.zeros(num_pois + 1, dtype=bool)
    drop[np.asarray(train_items, dtype=np.int64)] = True
    drop[target_id] = False
    return all_ids[~drop[1:]]


def _eval_threads(threads) -> int:
    if threads is None:
        threads = int(os.environ.get("SANST_THREADS", "1"))
    if threads < 1:
        raise ValueError(f"threads must be at least 1, got {threads}")
    return threads


def evaluate(params: ModelParams, catalog, split, k: int = 10,
             policy: str = "exclude-train", threads=None) -> EvalReport:
    """Rank every user's held-out visit and average hit@k and nDCG@k.

    catalog provides num_pois and poi_cells; split is a list of
    UserExample. Set threads (or SANST_THREADS) to fan user scoring out
    across workers; results are ordered by the split order either way.
    """
    if policy not in CANDIDATE_POLICIES:
        raise ValueError(f"unknown candidate policy {policy!r}")
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if not split:
        raise ValueError("empty evaluation split")
    threads = _eval_threads(threads)
    num_pois = catalog.num_pois
    poi_cells = catalog.poi_cells
    max_len = params.config.max_len

    cell_table = None
    if params.config.use_spatial:
        from .spatial import CellTable
        cell_table = CellTable(
            sorted(set(poi_cells[1:])), params.spatial)
    all_ids = np.arange(1, num_pois + 1, dtype=np.int64)
    catalog_rows = embed_candidates(params, all_ids, poi_cells, cell_table).data

    def rank_user(ex):
        x, d, last = eval_window(ex.train_items, ex.train_days, max_len)
        f = forward(params, x, d, int(ex.test_day), poi_cells, cell_table)
        f_last = f.data[last]
        cand = candidate_ids_for(num_pois, ex.train_items, int(ex.test_item), policy)
        scores = catalog_rows[cand - 1] @ f_last
        return rank_of_target(scores, cand, int(ex.test_item))

    if threads == 1:
        ranks = [rank_user(ex) for ex in split]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ranks = list(pool.map(rank_user, split))

    hits = [hit_at_k(r, k) for r in ranks]
    gains = [ndcg_at_k(r, k) for r in ranks]
    return EvalReport(hit=float(np.mean(hits)), ndcg=float(np.mean(gains)),
                      ranks=ranks, k=k, policy=policy, num_users=len(split))


def report_text(report: EvalReport) -> str:
    lines = [
        f"users\t{report.num_users}",
        f"k\t{report.k}",
        f"policy\t{report.policy}",
        f"hit@{report.k}\t{report.hit:.6f}",
        f"ndcg@{report.k}\t{report.ndcg:.6f}",
    ]
    return "\n".join(lines) + "\n"


def report_json(report: EvalReport) -> str:
    payload = {
        "num_users": report.num_users,
        "k": report.k,
        "policy": report.policy,
        "hit": report.hit,
        "ndcg": report.ndcg,
        "ranks": [int(r) for r in report.ranks],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
