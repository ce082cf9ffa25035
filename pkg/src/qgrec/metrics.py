"""Ranking metrics and the candidate-list evaluation harness.

Single-relevant-item setting: each user has one ground-truth item inside a
candidate set. Ranks are 1-based with ties broken by ascending item id
(deterministic); metric accumulation is float64 regardless of model
precision. GAUC weights each user's AUC by the size of their candidate list;
users without negatives are skipped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class EvaluationError(ValueError):
    pass


def ndcg_at_k(rank: int, k: int = 10) -> float:
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def hr_at_k(rank: int, k: int = 10) -> float:
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1.0 if rank <= k else 0.0


def mrr(rank: int) -> float:
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1.0 / rank


def rank_and_ties(scores: np.ndarray, item_ids: np.ndarray, gt_index: int = 0):
    """1-based rank of the ground truth under (-score, item id) ordering.

    Returns (rank, n_tied) where n_tied counts other candidates sharing the
    ground truth's score.
    """
    s = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(item_ids)
    gt_score = s[gt_index]
    gt_id = ids[gt_index]
    better = int((s > gt_score).sum())
    tied = (s == gt_score)
    n_tied = int(tied.sum()) - 1
    tied_before = int((ids[tied] < gt_id).sum())
    return better + tied_before + 1, n_tied


def user_auc(scores: np.ndarray, gt_index: int = 0) -> float:
    """(negatives strictly below + half of ties) / negatives."""
    s = np.asarray(scores, dtype=np.float64)
    if len(s) < 2:
        raise EvaluationError("user has no negatives")
    gt = s[gt_index]
    neg = np.delete(s, gt_index)
    below = float((neg < gt).sum())
    tied = float((neg == gt).sum())
    return (below + 0.5 * tied) / len(neg)


def gauc(per_user_scores: dict) -> float:
    """Candidate-count-weighted mean of per-user AUCs.

    per_user_scores maps user -> score array with the ground truth at
    index 0. Users with fewer than 2 candidates are skipped.
    """
    num = den = 0.0
    for u in sorted(per_user_scores):
        s = per_user_scores[u]
        if len(s) < 2:
            continue
        num += user_auc(s) * len(s)
        den += len(s)
    if den == 0:
        raise EvaluationError("no user has negatives to rank against")
    return num / den


@dataclass
class MetricReport:
    ndcg_at_k: float
    hr_at_k: float
    mrr: float
    gauc: float
    k: int
    n_users: int
    ties_total: int
    per_user: list = field(default_factory=list, repr=False)
    notes: dict = field(default_factory=dict)

    def as_dict(self, with_detail: bool = False) -> dict:
        out = {
            "ndcg_at_k": self.ndcg_at_k, "hr_at_k": self.hr_at_k,
            "mrr": self.mrr, "gauc": self.gauc, "k": self.k,
            "n_users": self.n_users, "ties_total": self.ties_total,
            "notes": self.notes,
        }
        if with_detail:
            out["per_user"] = self.per_user
        return out

    def to_json(self, path, with_detail: bool = False) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.as_dict(with_detail), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_text(self) -> str:
        lines = [
            f"users evaluated : {self.n_users}",
            f"tie policy      : ascending item id; {self.ties_total} tied scores",
            "gauc weighting  : per-user candidate count",
            f"{'metric':<10}{'value':>10}",
            f"{'NDCG@' + str(self.k):<10}{self.ndcg_at_k:>10.4f}",
            f"{'HR@' + str(self.k):<10}{self.hr_at_k:>10.4f}",
            f"{'MRR':<10}{self.mrr:>10.4f}",
            f"{'GAUC':<10}{self.gauc:>10.4f}",
        ]
        return "\n".join(lines)


def evaluate_scores(per_user_scores: dict, per_user_items: dict,
                    k: int = 10) -> MetricReport:
    """Aggregate metrics from raw candidate scores (ground truth at index 0)."""
    if not per_user_scores:
        raise EvaluationError("nothing to evaluate")
    nd = hr = rr = 0.0
    ties_total = 0
    detail = []
    for u in sorted(per_user_scores):
        rank, tied = rank_and_ties(per_user_scores[u], per_user_items[u])
        ties_total += tied
        nd += ndcg_at_k(rank, k)
        hr += hr_at_k(rank, k)
        rr += mrr(rank)
        detail.append({"user": int(u), "rank": int(rank), "tied": int(tied),
                       "n_candidates": int(len(per_user_scores[u]))})
    n = len(per_user_scores)
    return MetricReport(
        ndcg_at_k=nd / n, hr_at_k=hr / n, mrr=rr / n,
        gauc=gauc(per_user_scores), k=k, n_users=n, ties_total=ties_total,
        per_user=detail,
        notes={"tie_policy": "ascending item id",
               "gauc_weighting": "per-user candidate count"})


def evaluate(model, ds, candidates: dict, split: str = "test",
             k: int = 10) -> MetricReport:
    """Score per-user candidate lists with the model and aggregate."""
    users = sorted(candidates)
    scores = model.score_candidates(ds, users, candidates, split=split)
    per_items = {u: np.asarray(candidates[u]) for u in users}
    return evaluate_scores(scores, per_items, k=k)
