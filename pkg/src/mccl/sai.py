"""Self-adaptive intervention on strong-view features.

The per-image point-to-point similarity sets an intervention strength
``v_u = lam * (1 + S_p2p)``. It controls both a spatial mask that drops the most
activated positions and a multiplicative uniform noise in ``[-v_u, v_u]``. The decoder
outputs for the perturbed features are pulled toward the weak-view prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Tensor

DEFAULT_LAMBDA = 0.15
_S_TOL = 1e-9


@dataclass(frozen=True)
class InterventionState:
    s_p2p: float
    lam: float
    v_u: float
    b_l: float
    b_r: float
    u: float | None = None
    noise_seed: int | None = None


def intervention_value(s_p2p: float, lam: float = DEFAULT_LAMBDA) -> float:
    if lam <= 0:
        raise ContractError(f"lambda must be positive, got {lam}")
    s = float(s_p2p)
    if not (-1.0 - _S_TOL <= s <= 1.0 + _S_TOL):
        raise ContractError(f"S_p2p must lie in [-1, 1], got {s}")
    s = min(1.0, max(-1.0, s))
    return lam * (1.0 + s)


def boundaries(v_u: float) -> tuple[float, float]:
    """(max(0, 9/10 - v_u), min(1, 11/10 - v_u)), both clamped to [0, 1]."""
    if v_u < 0:
        raise ContractError(f"intervention value must be >= 0, got {v_u}")
    # written over a common denominator so decimal inputs round to the nearest double
    b_l = max(0.0, (9.0 - 10.0 * v_u) / 10.0)
    b_r = min(1.0, max(0.0, (11.0 - 10.0 * v_u) / 10.0))
    return b_l, b_r


def intervention_state(s_p2p: float, lam: float = DEFAULT_LAMBDA) -> InterventionState:
    v = intervention_value(s_p2p, lam)
    b_l, b_r = boundaries(v)
    return InterventionState(float(s_p2p), lam, v, b_l, b_r)


def masking_matrix(F_s, b_l: float, b_r: float, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Binary keep-mask of shape 1×p×q for one C×p×q feature map, and the threshold draw u.

    Positions whose channel mean reaches ``max(mean) * u`` with ``u ~ U(b_l, b_r)`` are
    zeroed. An all-zero map is kept whole.
    """
    if b_l > b_r:
        raise ContractError(f"need b_l <= b_r, got ({b_l}, {b_r})")
    feats = F_s.data if isinstance(F_s, Tensor) else np.asarray(F_s)
    if feats.ndim != 3:
        raise ContractError(f"masking_matrix expects C×p×q features, got {feats.shape}")
    m = feats.mean(axis=0)
    u = float(rng.uniform(b_l, b_r))
    top = m.max()
    if top == 0:
        return np.ones((1,) + m.shape, dtype=feats.dtype), u
    return (m < top * u).astype(feats.dtype)[None], u


def apply_mask(F_s: Tensor, G: np.ndarray) -> Tensor:
    G = np.asarray(G, dtype=F_s.dtype)
    if G.shape[-2:] != F_s.shape[-2:]:
        raise ContractError(f"mask spatial shape {G.shape[-2:]} != feature shape {F_s.shape[-2:]}")
    return F_s * Tensor(G)


def sample_noise(v_u: float, shape, seed_or_rng, dtype=np.float64) -> np.ndarray:
    if v_u < 0:
        raise ContractError(f"noise amplitude must be >= 0, got {v_u}")
    if v_u == 0:
        return np.zeros(shape, dtype=dtype)
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    return rng.uniform(-v_u, v_u, size=shape).astype(dtype)


def inject_noise(F_s: Tensor, N: np.ndarray) -> Tensor:
    N = np.asarray(N, dtype=F_s.dtype)
    if N.shape != F_s.shape:
        raise ContractError(f"noise shape {N.shape} != feature shape {F_s.shape}")
    return F_s * Tensor(N) + F_s


def prob_distance(p: Tensor, target, kind: str = "mse", eps: float = 1e-12) -> Tensor:
    """Distance between probability maps (class axis 1, or 0 for unbatched input); ``target`` is constant.

    ``mse`` averages over every element; ``kl`` and ``ce`` sum over classes and average
    over the remaining positions.
    """
    q = target.data if isinstance(target, Tensor) else np.asarray(target)
    q = q.astype(p.dtype, copy=False)
    if q.shape != p.shape:
        raise ContractError(f"distribution shape mismatch: {p.shape} vs {q.shape}")
    if kind == "mse":
        return ((p - Tensor(q)) ** 2).mean()
    axis = 1 if p.ndim == 4 else 0
    n = p.data.size // p.shape[axis]
    log_p = (p + eps).log()
    if kind == "ce":
        return -(log_p * Tensor(q)).sum() * (1.0 / n)
    if kind == "kl":
        const = float((q * np.log(q + eps)).sum())
        return (const - (log_p * Tensor(q)).sum()) * (1.0 / n)
    raise ContractError(f"unknown distance {kind!r}")


def masking_loss(p_m: Tensor, p_w, distance: str = "mse") -> Tensor:
    return prob_distance(p_m, p_w, distance)


def noise_loss(p_n: Tensor, p_w, distance: str = "mse") -> Tensor:
    return prob_distance(p_n, p_w, distance)
