"""Ranking-driven sample enhancement.

Once per epoch every user's negative set S is scored twice: by the retrieval
head (sigmoid of the inner product with the next-item vector) and by the
click head (target-aware). Items the retrieval side likes but the click head
does not are kept as hard negatives H for the next epoch; items the click
head scores above ``alpha`` move to the potential-favorite set P, leave the
negative pool for good, and become positive click examples.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from unigrf.data import SequenceSet, sample_uniform_negatives, user_rng
from unigrf.errors import ContractError
from unigrf.model import UniGRFModel

AUDIT_FIELDS = ("user", "item", "score_retrieval", "score_ranking", "relative_score", "action")


class ScoredNegative(NamedTuple):
    item: int
    score_retrieval: float
    score_ranking: float
    relative_score: float


@dataclass(frozen=True)
class EnhancerConfig:
    m: int = 5
    alpha: float = 0.85
    num_negatives: int = 128

    def __post_init__(self):
        if not 0 <= self.m <= self.num_negatives:
            raise ContractError(f"need 0 <= m <= |S|, got m={self.m}, |S|={self.num_negatives}")
        if not 0 < self.alpha <= 1:
            raise ContractError(f"alpha must lie in (0, 1], got {self.alpha}")

    @property
    def active(self) -> bool:
        """alpha = 1 can never fire (scores are < 1), so m = 0 with it disables the module."""
        return self.m > 0 or self.alpha < 1


def relative_score(score_retrieval, score_ranking):
    score_retrieval = np.asarray(score_retrieval, dtype=np.float64)
    score_ranking = np.maximum(np.asarray(score_ranking, dtype=np.float64), np.finfo(np.float64).tiny)
    return score_retrieval * (score_retrieval / score_ranking - 1.0)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def score_negatives(model: UniGRFModel, items: np.ndarray, behaviors: np.ndarray, negatives: np.ndarray) -> dict:
    """Retrieval, click and relative scores for each user's negatives, all (B, |S|)."""
    negatives = np.atleast_2d(negatives)
    if negatives.shape[1] == 0:
        empty = np.zeros(negatives.shape)
        return {"items": negatives, "score_retrieval": empty, "score_ranking": empty, "relative": empty}
    latent, logits = model.score_users(items, behaviors, negatives)
    return scores_from_outputs(model, latent, logits, negatives)


def scores_from_outputs(model: UniGRFModel, latent: np.ndarray, logits: np.ndarray, negatives: np.ndarray) -> dict:
    emb = model.item_embeddings.values[negatives]  # (B, S, d)
    s_ret = _sigmoid(np.einsum("bsd,bd->bs", emb, latent))
    s_rank = _sigmoid(logits)
    return {"items": negatives, "score_retrieval": s_ret, "score_ranking": s_rank,
            "relative": relative_score(s_ret, s_rank)}


def refresh_hard_set(items: np.ndarray, relative: np.ndarray, m: int) -> np.ndarray:
    """Items with the m largest relative scores; ties go to the smaller item index."""
    items = np.asarray(items)
    if m <= 0 or items.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((items, -np.asarray(relative)))
    return items[order[:m]].astype(np.int64)


def detect_potential_positives(items: np.ndarray, score_ranking: np.ndarray, alpha: float) -> np.ndarray:
    return np.asarray(items)[np.asarray(score_ranking) > alpha].astype(np.int64)


def compose_next_epoch_negatives(hard, potential, positives, num_items: int, size: int,
                                 rng: np.random.Generator) -> np.ndarray:
    """Hard negatives topped up with fresh uniform draws to ``size`` distinct items."""
    hard = np.asarray(hard, dtype=np.int64)
    if size < len(hard):
        raise ContractError(f"negative-set size {size} is smaller than the hard set ({len(hard)})")
    exclude = np.concatenate([np.asarray(positives, np.int64), np.asarray(potential, np.int64), hard])
    fresh = sample_uniform_negatives(num_items, exclude, size - len(hard), rng)
    return np.concatenate([hard, fresh])


def apply_relabels(potential, seq) -> list[tuple[np.ndarray, np.ndarray, int, int]]:
    """One (history items, history behaviors, candidate, label=1) example per potential favorite."""
    return [(seq.items, seq.behaviors, int(p), 1) for p in potential]


@dataclass
class RefreshStats:
    hard_total: int = 0
    potential_new: int = 0
    potential_total: int = 0


@dataclass
class RankingEnhancer:
    """Per-user S, H and P across epochs."""

    config: EnhancerConfig
    num_items: int
    seed: int = 0
    negatives: list[np.ndarray] = field(default_factory=list)
    hard: list[np.ndarray] = field(default_factory=list)
    potential: list[np.ndarray] = field(default_factory=list)

    def initialize(self, seqs: SequenceSet) -> None:
        self.hard = [np.zeros(0, dtype=np.int64) for _ in range(len(seqs))]
        self.potential = [np.zeros(0, dtype=np.int64) for _ in range(len(seqs))]
        self.negatives = [self._compose(seqs, row, epoch=0) for row in range(len(seqs))]

    def _compose(self, seqs: SequenceSet, row: int, epoch: int) -> np.ndarray:
        return compose_next_epoch_negatives(self.hard[row], self.potential[row], seqs.seen(row), self.num_items,
                                            self.config.num_negatives, user_rng(self.seed, int(seqs.user[row]), epoch))

    def negatives_for(self, rows) -> np.ndarray:
        return np.stack([self.negatives[r] for r in rows])

    def relabel_block(self, rows) -> tuple[np.ndarray, np.ndarray]:
        """Potential favorites of ``rows`` as a padded (B, max|P|) block plus its mask."""
        width = max((len(self.potential[r]) for r in rows), default=0)
        cands = np.zeros((len(rows), width), dtype=np.int64)
        mask = np.zeros((len(rows), width), dtype=bool)
        for i, r in enumerate(rows):
            p = self.potential[r]
            cands[i, : len(p)] = p
            mask[i, : len(p)] = True
        return cands, mask

    def update_user(self, seqs: SequenceSet, row: int, scores: dict, epoch: int, audit: list | None = None) -> tuple[int, int]:
        """Apply one user's scores; returns (|H|, number of new P items)."""
        items = scores["items"]
        previous_hard = set(self.hard[row].tolist())
        new_p = np.zeros(0, dtype=np.int64)
        if self.config.alpha < 1:
            new_p = np.setdiff1d(detect_potential_positives(items, scores["score_ranking"], self.config.alpha),
                                 self.potential[row])
            self.potential[row] = np.union1d(self.potential[row], new_p)
        keep = ~np.isin(items, self.potential[row])
        self.hard[row] = refresh_hard_set(items[keep], scores["relative"][keep], self.config.m)
        self.negatives[row] = self._compose(seqs, row, epoch)
        if audit is not None:
            user = int(seqs.user[row])
            hard_now = set(self.hard[row].tolist())
            new_set = set(new_p.tolist())
            for j, item in enumerate(items.tolist()):
                action = "relabel" if item in new_set else "hard" if item in hard_now else "drop" if item in previous_hard else None
                if action:
                    audit.append((user, item, float(scores["score_retrieval"][j]), float(scores["score_ranking"][j]),
                                  float(scores["relative"][j]), action))
        return len(self.hard[row]), len(new_p)

    def resample(self, seqs: SequenceSet, epoch: int) -> None:
        """Uniform redraw for every user, used when the module is disabled."""
        self.negatives = [self._compose(seqs, row, epoch) for row in range(len(seqs))]

    def totals(self) -> tuple[int, int]:
        return sum(len(h) for h in self.hard), sum(len(p) for p in self.potential)


def write_audit(path: str | os.PathLike, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AUDIT_FIELDS)
        writer.writerows(rows)
