"""Adam optimizer with bias correction, plus the step-decay schedule."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-10


def init_adam_state(params) -> dict:
    return {
        "t": 0,
        "m": [np.zeros_like(p) for p in params],
        "v": [np.zeros_like(p) for p in params],
    }


def adam_step(
    params,
    grads,
    state,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
):
    """One Adam update, in place on ``params`` and ``state``.

    ``params`` and ``grads`` are aligned lists of float64 arrays; ``state``
    comes from init_adam_state. Deterministic given identical inputs.
    """
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise DimensionError(
            f"adam_step length mismatch: {len(params)} params, "
            f"{len(grads)} grads, {len(state['m'])} moment slots"
        )
    for p, g, m in zip(params, grads, state["m"]):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(
                f"adam_step shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}"
            )
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def lr_at_epoch(epoch: int, base_lr: float, boundaries, factor: float = 0.1) -> float:
    """Step schedule: multiply by ``factor`` at each epoch boundary passed.

    ``epoch`` is 1-based; a boundary of 10 means epochs 11+ use the reduced
    rate.
    """
    drops = sum(1 for b in boundaries if epoch > b)
    return base_lr * (factor**drops)
