"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

import logging
from typing import Callable, Mapping

import numpy as np

from unigrf.errors import ContractError, NumericError
from unigrf.engine.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def finite_difference_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from ``params`` each time it is called.
    With ``max_coords`` set, each parameter is probed at that many randomly
    chosen coordinates instead of all of them.
    """
    if eps <= 0:
        raise ContractError(f"finite-difference step must be positive, got {eps}")
    for p in params.values():
        p.zero_grad()
    loss = f(params)
    base = loss.item()
    if not np.isfinite(base):
        raise NumericError(f"loss is non-finite at the unperturbed point: {base}")
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        flat = p.values.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        grad_flat = analytic[name].reshape(-1)
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = f(params).item()
                flat[i] = orig - eps
                down = f(params).item()
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError(f"non-finite loss while perturbing {name!r} at flat index {int(i)}")
                numeric = (up - down) / (2.0 * eps)
                err = float(relative_error(grad_flat[i], numeric))
                if err > worst:
                    worst = err
                    logger.debug("new worst %s[%d]: analytic=%g numeric=%g", name, i, grad_flat[i], numeric)
    return worst
