"""Adam optimizer as a pure function over explicit parameter lists."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TrainingError


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def init_adam_state(params: list[np.ndarray]) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        t=0,
    )


def adam_step(params, grads, state: AdamState, hyper
              ) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and new state.

    hyper supplies learning_rate, adam_beta1, adam_beta2 and adam_eps.
    Inputs are never mutated, so a caller can keep earlier parameter
    snapshots alive (checkpoint top-k bookkeeping relies on this).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise TrainingError(
            f"parameter/gradient/state length mismatch: {len(params)} params, "
            f"{len(grads)} grads, {len(state.m)} moment buffers"
        )
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise TrainingError(
                f"gradient {i} shape {g.shape} does not match parameter "
                f"shape {p.shape}"
            )
        if not np.isfinite(g).all():
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise TrainingError(
                f"non-finite gradient in parameter {i}: {bad} of {g.size} "
                "entries; training diverged"
            )

    b1, b2 = hyper.adam_beta1, hyper.adam_beta2
    lr, eps = hyper.learning_rate, hyper.adam_eps
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m1 = b1 * m + (1 - b1) * g
        v1 = b2 * v + (1 - b2) * g * g
        mhat = m1 / (1 - b1 ** t)
        vhat = v1 / (1 - b2 ** t)
        new_m.append(m1.astype(p.dtype))
        new_v.append(v1.astype(p.dtype))
        new_p.append((p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype))
    return new_p, AdamState(m=new_m, v=new_v, t=t)
