"""Decoupled-weight-decay Adam with per-parameter moment state.

Parameters whose gradient is None are skipped entirely: no moment decay, no
weight decay, no step-count advance. The training loop relies on this to keep
an untouched severity branch bitwise unchanged.
"""

from __future__ import annotations

import numpy as np


class NonFiniteGradError(ValueError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter '{name}'")
        self.name = name


def init_state(params: dict) -> dict:
    """Fresh zero moments and step counters matching the parameter shapes."""
    return {
        name: {
            "m": np.zeros_like(p.data),
            "v": np.zeros_like(p.data),
            "t": 0,
        }
        for name, p in params.items()
    }


def adamw_step(
    params: dict,
    state: dict,
    lr_for,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update in-place on every parameter that has a gradient.

    lr_for is either a float or a callable name -> learning rate, so parameter
    groups (encoder vs decoder/prompt) can run at different rates.
    """
    b1, b2 = betas
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradError(name)
        st = state[name]
        if st["m"].shape != p.data.shape:
            raise ValueError(
                f"optimizer state shape {st['m'].shape} does not match "
                f"parameter '{name}' shape {p.data.shape}"
            )
        lr = lr_for(name) if callable(lr_for) else lr_for
        st["t"] += 1
        t = st["t"]
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * (g * g)
        mhat = st["m"] / (1.0 - b1**t)
        vhat = st["v"] / (1.0 - b2**t)
        p.data -= (lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.data)).astype(
            p.data.dtype
        )
