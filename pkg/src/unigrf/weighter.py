"""Adaptive weighting of the retrieval and ranking losses.

Each stage's convergence rate is the ratio of its current to previous
(exponentially smoothed) loss. A softmax over rate/temperature, scaled per
stage, gives the weights, so the stage that is improving more slowly gets
the larger share.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from unigrf import engine as E
from unigrf.engine import Tensor
from unigrf.errors import ContractError

logger = logging.getLogger(__name__)

TRACE_FIELDS = ("t", "loss_retrieval", "loss_ranking", "r_a", "r_b", "w_a", "w_b")


def compute_weights(r_a: float, r_b: float, temperature: float = 1.0, lambda_a: float = 1.0,
                    lambda_b: float = 1.0) -> tuple[float, float]:
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if lambda_a <= 0 or lambda_b <= 0:
        raise ContractError(f"loss scales must be positive, got {lambda_a}, {lambda_b}")
    za, zb = r_a / temperature, r_b / temperature
    top = max(za, zb)
    ea, eb = math.exp(za - top), math.exp(zb - top)
    total = ea + eb
    return lambda_a * ea / total, lambda_b * eb / total


def combine(w_a: float, loss_retrieval: Tensor | None, w_b: float, loss_ranking: Tensor | None) -> Tensor:
    """w_a * L_retrieval + w_b * L_ranking with the weights held constant.

    Zero-weight terms are left out of the graph entirely.
    """
    pairs = [(w, loss) for w, loss in ((w_a, loss_retrieval), (w_b, loss_ranking)) if loss is not None]
    terms = [E.scale(loss, w) for w, loss in pairs if w != 0] or [E.scale(loss, w) for w, loss in pairs[:1]]
    if not terms:
        raise ContractError("combine needs at least one loss")
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


@dataclass
class WeighterState:
    temperature: float = 1.0
    lambda_a: float = 1.0
    lambda_b: float = 1.0
    ema_decay: float = 0.9
    smoothed_retrieval: float | None = None
    smoothed_ranking: float | None = None
    r_a: float = 1.0
    r_b: float = 1.0
    w_a: float = 0.5
    w_b: float = 0.5
    t: int = 0
    trace: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not 0 <= self.ema_decay < 1:
            raise ContractError(f"EMA decay must lie in [0, 1), got {self.ema_decay}")
        self.w_a, self.w_b = compute_weights(1.0, 1.0, self.temperature, self.lambda_a, self.lambda_b)


def _advance(prev: float | None, current: float, decay: float, stage: str) -> tuple[float, float]:
    if prev is None:
        return current, 1.0
    smoothed = decay * prev + (1.0 - decay) * current
    if prev <= 0:
        logger.warning("%s smoothed loss collapsed to %g; clamping its rate to 1", stage, prev)
        return smoothed, 1.0
    return smoothed, smoothed / prev


def update_rates(loss_retrieval: float, loss_ranking: float, state: WeighterState) -> tuple[float, float]:
    """Advance the smoothed losses and return (r_a, r_b); both are 1 on the first call."""
    state.smoothed_retrieval, state.r_a = _advance(state.smoothed_retrieval, loss_retrieval, state.ema_decay, "retrieval")
    state.smoothed_ranking, state.r_b = _advance(state.smoothed_ranking, loss_ranking, state.ema_decay, "ranking")
    return state.r_a, state.r_b


def step(loss_retrieval: float, loss_ranking: float, state: WeighterState) -> tuple[float, float]:
    """Rates, then weights, for one time step; the step is appended to the trace."""
    update_rates(loss_retrieval, loss_ranking, state)
    state.w_a, state.w_b = compute_weights(state.r_a, state.r_b, state.temperature, state.lambda_a, state.lambda_b)
    state.trace.append(dict(zip(TRACE_FIELDS, (state.t, loss_retrieval, loss_ranking,
                                               state.r_a, state.r_b, state.w_a, state.w_b))))
    state.t += 1
    return state.w_a, state.w_b


def audit_trace(trace, lambda_a: float, lambda_b: float, tol: float = 1e-12) -> list[int]:
    """Steps where the slower stage did not receive the larger normalized weight."""
    bad = []
    for rec in trace:
        na, nb = rec["w_a"] / lambda_a, rec["w_b"] / lambda_b
        if abs(na + nb - 1.0) > tol:
            bad.append(rec["t"])
        elif rec["r_a"] > rec["r_b"] and not na > nb:
            bad.append(rec["t"])
        elif rec["r_b"] > rec["r_a"] and not nb > na:
            bad.append(rec["t"])
    return bad
