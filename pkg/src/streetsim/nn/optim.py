"""RMSProp with shared slot state."""

from __future__ import annotations

import numpy as np

from .params import ParamSet, UnknownParam


class MisalignedGradients(Exception):
    """A gradient name or shape does not line up with the parameter set."""


def rmsprop_update(
    params: ParamSet,
    grads: dict,
    lr: float,
    decay: float = 0.99,
    epsilon: float = 0.1,
    momentum: float = 0.0,
    only: "list[str] | None" = None,
) -> None:
    """In-place RMSProp step on every named gradient.

    ms <- decay * ms + (1 - decay) * g^2
    theta <- theta - lr * g / sqrt(ms + epsilon)

    Slot arrays start at zero, so the first step divides by
    sqrt((1 - decay) * g^2 + epsilon). With momentum > 0 the scaled gradient
    feeds a velocity buffer instead of the parameter directly. `only`
    restricts the update to the listed names (frozen-pathway training).
    """
    allowed = None if only is None else set(only)
    for name, g in grads.items():
        if g is None or (allowed is not None and name not in allowed):
            continue
        try:
            t = params[name]
        except UnknownParam:
            raise MisalignedGradients(f"gradient for unknown parameter {name!r}") from None
        g = np.asarray(g, dtype=t.data.dtype)
        if g.shape != t.data.shape:
            raise MisalignedGradients(f"{name!r}: grad {g.shape} vs param {t.data.shape}")
        ms_key = name + "/ms"
        ms = params.slots.get(ms_key)
        if ms is None:
            ms = np.zeros_like(t.data)
            params.slots[ms_key] = ms
        ms *= decay
        ms += (1.0 - decay) * g * g
        step = lr * g / np.sqrt(ms + epsilon)
        if momentum > 0.0:
            mom_key = name + "/mom"
            vel = params.slots.get(mom_key)
            if vel is None:
                vel = np.zeros_like(t.data)
                params.slots[mom_key] = vel
            vel *= momentum
            vel += step
            step = vel
        t.data -= step


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.square(g, dtype=np.float64).sum())
    return float(np.sqrt(total))


def clip_grads(grads: dict, max_norm: float) -> dict:
    """Rescale all gradients if their joint norm exceeds max_norm."""
    norm = global_grad_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    factor = max_norm / norm
    return {n: (None if g is None else g * factor) for n, g in grads.items()}
