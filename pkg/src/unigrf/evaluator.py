"""Full-catalog retrieval metrics and click AUC.

Retrieval ranks the held-out item against every catalog item (padding
excluded, previously seen items kept). Ties count against the held-out item.
AUC is computed over one target-aware click score per user, labelled with
that interaction's binarized rating.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from unigrf.data import SequenceSet
from unigrf.errors import ContractError
from unigrf.model import UniGRFModel, shift_append

logger = logging.getLogger(__name__)

DEFAULT_KS = (10, 50)
AUC_POPULATION = "one target-aware click score per user for the held-out interaction, label = binarized rating"


def retrieval_rank(scores: np.ndarray, target: int) -> int:
    """1 + number of real items scoring strictly higher than ``target``."""
    scores = np.asarray(scores)
    return int(1 + np.count_nonzero(scores[1:] > scores[target]))


def batch_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Row-wise ``retrieval_rank`` for a (B, |I|+1) score block."""
    own = scores[np.arange(len(targets)), targets]
    return 1 + (scores[:, 1:] > own[:, None]).sum(axis=1)


def topk_metrics(ranks, ks=DEFAULT_KS) -> dict:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ContractError("no ranks to summarize")
    if (ranks < 1).any():
        raise ContractError("ranks start at 1")
    gains = 1.0 / np.log2(ranks + 1.0)
    return {
        "ndcg": {int(k): float(np.where(ranks <= k, gains, 0.0).mean()) for k in ks},
        "hr": {int(k): float((ranks <= k).mean()) for k in ks},
        "mrr": float((1.0 / ranks).mean()),
    }


def auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with mid-ranks for ties; None if only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        logger.warning("AUC undefined: %d positives, %d negatives", n_pos, n_neg)
        return None
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    _, first, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    mid = first + (counts + 1) / 2.0  # 1-based average rank of each tie group
    ranks = np.empty_like(scores)
    ranks[order] = np.repeat(mid, counts)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalReport:
    split: str
    users: int
    ks: list[int]
    ndcg: dict
    hr: dict
    mrr: float
    auc: float | None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        d["hr"] = {str(k): v for k, v in self.hr.items()}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())


def split_inputs(seqs: SequenceSet, split: str):
    """History, held-out item and its label for ``split``.

    Validation histories end before the validation item; test histories
    include it (shifted in as the newest slot) and never contain the test item.
    """
    if split == "valid":
        return seqs.items, seqs.behaviors, seqs.valid_item, seqs.valid_label
    if split == "test":
        items, beh = shift_append(seqs.items, seqs.behaviors, seqs.valid_item, seqs.valid_label)
        return items, beh, seqs.test_item, seqs.test_label
    raise ContractError(f"split must be 'valid' or 'test', got {split!r}")


def evaluate(model: UniGRFModel, seqs: SequenceSet, split: str = "test", ks=DEFAULT_KS,
             batch_size: int = 256, extra_candidates=None) -> tuple[EvalReport, dict]:
    """Score ``split`` for every user.

    ``extra_candidates`` (U, C) piggybacks more target-aware candidates onto
    the same forward passes; their click logits come back in the second
    return value along with per-user ranks, click logits and next-item vectors.
    """
    items, beh, targets, labels = split_inputs(seqs, split)
    ranks, logits, latents, extra = [], [], [], []
    for start in range(0, len(seqs), batch_size):
        sl = slice(start, start + batch_size)
        cands = targets[sl, None]
        if extra_candidates is not None:
            cands = np.concatenate([cands, extra_candidates[sl]], axis=1)
        latent, z = model.score_users(items[sl], beh[sl], cands)
        scores = latent @ model.item_embeddings.values.T
        ranks.append(batch_ranks(scores, targets[sl]))
        logits.append(z[:, 0])
        latents.append(latent)
        extra.append(z[:, 1:])
    ranks = np.concatenate(ranks)
    logits = np.concatenate(logits)
    metrics = topk_metrics(ranks, ks)
    report = EvalReport(
        split=split, users=len(seqs), ks=[int(k) for k in ks], ndcg=metrics["ndcg"], hr=metrics["hr"],
        mrr=metrics["mrr"], auc=auc(logits, labels),
        metadata={"auc_population": AUC_POPULATION, "tie_rule": "pessimistic strict-greater",
                  "candidates": "full catalog, seen items kept"},
    )
    details = {"ranks": ranks, "logits": logits, "latents": np.concatenate(latents),
               "extra_logits": np.concatenate(extra) if extra_candidates is not None else None}
    return report, details


def write_ranks(path: str | os.PathLike, seqs: SequenceSet, ranks: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("user", "rank"))
        w.writerows(zip(seqs.user.tolist(), ranks.tolist()))


def random_ndcg_expectation(num_items: int, k: int = 10) -> tuple[float, float]:
    """Mean and per-user standard deviation of NDCG@k for a uniformly random rank."""
    gains = np.array([1.0 / math.log2(r + 1) for r in range(1, k + 1)])
    mean = gains.sum() / num_items
    var = (gains**2).sum() / num_items - mean**2
    return mean, math.sqrt(var)
