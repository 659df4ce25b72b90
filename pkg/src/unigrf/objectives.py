"""Retrieval (sampled softmax) and ranking (binary cross-entropy) losses.

Both are means over contributing positions, not sums, so their magnitude
does not depend on sequence length or batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from unigrf import engine as E
from unigrf.engine import Tensor
from unigrf.errors import ContractError
from unigrf.model import TransformOutputs, UniGRFModel, unsqueeze_last


@dataclass
class LossRecord:
    loss_retrieval: float
    loss_ranking: float
    count_retrieval: int
    count_ranking: int


def _total(x: Tensor) -> Tensor:
    while x.ndim > 0:
        x = E.row_sum(x)
    return x


def masked_mean(terms: Tensor, mask: np.ndarray) -> tuple[Tensor | None, int]:
    count = int(mask.sum())
    if count == 0:
        return None, 0
    return E.scale(_total(terms * Tensor(mask.astype(terms.values.dtype))), 1.0 / count), count


def softplus(z: Tensor) -> Tensor:
    """log(1 + e^z) as a two-way log-sum-exp against zero."""
    zero = Tensor(np.zeros(z.shape + (1,), dtype=z.values.dtype))
    return E.log_sum_exp_row(E.concat_rows([zero, unsqueeze_last(z)], axis=z.ndim))


def bce_with_logits(z: Tensor, labels: np.ndarray) -> Tensor:
    """Elementwise BCE(sigmoid(z), y) = softplus(z) - y z."""
    return softplus(z) - z * Tensor(np.asarray(labels, dtype=z.values.dtype))


def sampled_softmax_loss(latent: Tensor, positive: int, negatives, item_embeddings: Tensor) -> Tensor:
    """-log softmax of the positive's inner product against positive + negatives."""
    negatives = np.asarray(negatives, dtype=np.int64).reshape(-1)
    if negatives.size == 0:
        raise ContractError("sampled softmax needs at least one negative")
    if positive in set(negatives.tolist()):
        raise ContractError(f"positive item {positive} also appears among the negatives")
    cand = np.concatenate([[positive], negatives])
    logits = E.row_sum(E.gather_rows(item_embeddings, cand) * latent)
    return E.log_sum_exp_row(logits) - E.gather_rows(logits, np.array(0))


def retrieval_loss_over_sequence(
    outputs: TransformOutputs, items: np.ndarray, negatives: np.ndarray, item_embeddings: Tensor
) -> tuple[Tensor | None, int]:
    """Mean sampled-softmax loss over next-item predictions.

    The behavior-token output after slot k-1 predicts the item in slot k; a
    term exists when both slots are real. ``negatives`` (B, |S|) is one set
    per user shared by all of that user's positions.
    """
    items = np.atleast_2d(items)
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.int64))
    n = items.shape[1]
    targets = items[:, 1:]
    mask = (items[:, :-1] != 0) & (targets != 0)
    if not mask.any():
        return None, 0
    clash = (targets[:, :, None] == negatives[:, None, :]).any(axis=2) & mask
    if clash.any():
        row, col = np.argwhere(clash)[0]
        raise ContractError(f"user row {row}: positive item {targets[row, col]} is in its negative set")

    pred = E.gather_rows(outputs.next_item_latents, np.arange(n - 1), axis=1)
    pos = E.row_sum(pred * E.gather_rows(item_embeddings, targets))
    neg = pred @ E.transpose(E.gather_rows(item_embeddings, negatives))
    logits = E.concat_rows([unsqueeze_last(pos), neg], axis=2)
    return masked_mean(E.log_sum_exp_row(logits) - pos, mask)


def ranking_bce_loss(
    outputs: TransformOutputs,
    items: np.ndarray,
    behaviors: np.ndarray,
    model: UniGRFModel,
    extra_logits: Tensor | None = None,
    extra_labels: np.ndarray | None = None,
    extra_mask: np.ndarray | None = None,
) -> tuple[Tensor | None, int]:
    """Mean click BCE over real slots, plus optional auxiliary (logit, label) examples.

    ``extra_mask`` marks which auxiliary entries are real when they come as a
    padded block; labels default to 1.
    """
    items = np.atleast_2d(items)
    z = model.ranking_logits(outputs.behavior_latents)
    mask = items != 0
    count = int(mask.sum())
    total = _total(bce_with_logits(z, behaviors) * Tensor(mask.astype(z.values.dtype))) if count else None
    if extra_logits is not None and extra_logits.size:
        labels = np.ones(extra_logits.shape) if extra_labels is None else extra_labels
        emask = np.ones(extra_logits.shape, bool) if extra_mask is None else np.asarray(extra_mask, bool)
        if emask.any():
            aux = _total(bce_with_logits(extra_logits, labels) * Tensor(emask.astype(z.values.dtype)))
            total = aux if total is None else total + aux
            count += int(emask.sum())
    if total is None:
        return None, 0
    return E.scale(total, 1.0 / count), count
