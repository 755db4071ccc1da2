from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                 indices=None) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` w.r.t. ``param.data``.

    ``indices`` restricts the probe to a subset of flat positions; the other
    entries of the result are left as NaN.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    for idx in range(flat.size) if indices is None else indices:
        orig = flat[idx]
        flat[idx] = orig + h
        plus = f().item()
        flat[idx] = orig - h
        minus = f().item()
        flat[idx] = orig
        out[idx] = (plus - minus) / (2.0 * h)
    return out.reshape(param.shape)


def check_grads(f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                rtol: float = 1e-4, atol: float = 1e-7, max_probes: int | None = None,
                rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare tape gradients with finite differences for every parameter.

    Returns the worst ``|analytic - numeric| - (atol + rtol*|numeric|)``
    excess per parameter (<= 0 means within tolerance).
    """
    for p in params.values():
        p.grad = None
    f().backward()
    report = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        idx = None
        if max_probes is not None and p.data.size > max_probes:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(p.data.size, size=max_probes, replace=False)
        numeric = numeric_grad(f, p, h=h, indices=idx)
        sel = ~np.isnan(numeric)
        excess = np.abs(analytic[sel] - numeric[sel]) - (atol + rtol * np.abs(numeric[sel]))
        report[name] = float(excess.max()) if excess.size else 0.0
    return report
