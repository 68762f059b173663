"""Central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError
from .tensor import Tensor, detect_anomaly, no_grad


def _as_list(params) -> list[Tensor]:
    if isinstance(params, Tensor):
        return [params]
    return list(params)


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with detect_anomaly():
        out = f()
        if out.data.size != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        out.backward()
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


def grad_check(
    f: Callable[..., Tensor],
    params,
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    grads: Sequence[np.ndarray] | None = None,
) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    ``f`` is called with no arguments and must read ``params`` (a Tensor or a list of
    Tensors) by closure. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.

    ``max_coords`` caps how many coordinates of each tensor are probed (a seeded random
    subset); ``None`` probes all of them. ``grads`` overrides the analytic gradient,
    which is how corrupted-gradient fixtures are fed in.
    """
    params = _as_list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ContractError("grad_check requires double precision parameters")
    if grads is None:
        grads = analytic_grads(f, params)
    rng = np.random.default_rng(seed)

    def evaluate() -> float:
        with no_grad(), detect_anomaly():
            return f().item()

    worst = 0.0
    for p, g in zip(params, grads):
        p.data = np.array(p.data, order="C", copy=True)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        gflat = np.asarray(g).reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate()
            flat[i] = orig - step
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            if not np.isfinite(num):
                raise NonFiniteError("central_difference")
            err = abs(gflat[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
