"""Finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from .params import ParamSet


def grad_check(
    graph_fn,
    params: ParamSet,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_elements_per_param: int = 40,
    seed: int = 0,
):
    """Compare analytic gradients against central differences.

    graph_fn() must rebuild the loss from the current parameter values and
    return a scalar Tensor. Parameters should be float64 for the stated
    tolerances to hold. Large tensors are probed at a deterministic random
    subset of elements; small ones exhaustively.

    Returns a report dict with per-parameter and overall max relative error.
    """
    params.zero_grad()
    loss = graph_fn()
    loss.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()}

    # (f(x+h) - f(x-h)) carries cancellation noise of order |f|*eps; treat
    # differences below that floor as agreement rather than letting the
    # relative metric blow up on near-zero gradient elements
    atol = max(1e-12, 50.0 * abs(float(loss.data)) * float(np.finfo(np.float64).eps) / h)

    rng = np.random.default_rng(seed)
    per_param = {}
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= max_elements_per_param:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=max_elements_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        max_rel = 0.0
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            f_plus = float(graph_fn().data)
            flat[k] = orig - h
            f_minus = float(graph_fn().data)
            flat[k] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            a = float(a_flat[k])
            diff = abs(a - fd)
            if diff <= atol:
                continue
            denom = max(abs(a), abs(fd))
            if denom < 1e-10:
                continue
            rel = diff / denom
            if rel > max_rel:
                max_rel = rel
        per_param[name] = max_rel
        if max_rel > worst:
            worst = max_rel
    params.zero_grad()
    return {
        "max_rel_error": worst,
        "per_param": per_param,
        "tolerance": tolerance,
        "passed": worst < tolerance,
    }
