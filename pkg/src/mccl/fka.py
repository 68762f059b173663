"""Feature knowledge alignment.

Two losses pull strong-view encoder features toward the weak view:

* point-to-point: mean per-position cosine between ``F_s`` and ``F_w``;
* outlier compactness: strong-view features of class k that sit farthest from the
  class prototype are pulled toward their nearest weak-view feature among those
  closest to the prototype.

Everything coming from the weak view, the selected intra-cluster features and the
prototypes is a constant for differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor, cosine_matrix, cosine_similarity, stack_scalars

DEFAULT_MOMENTUM = 0.99
DEFAULT_N_R = 16
DEFAULT_N_D = 256


def _const(x, dtype=None) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return arr if dtype is None else arr.astype(dtype, copy=False)


def p2p_similarities(F_s: Tensor, F_w) -> Tensor:
    """Per-image S_p2p for B×C×p×q feature batches; returns a length-B tensor."""
    F_w = _const(F_w, F_s.dtype)
    if F_s.shape != F_w.shape:
        raise ContractError(f"p2p shape mismatch: {F_s.shape} vs {F_w.shape}")
    if F_s.ndim != 4:
        raise ContractError(f"expected B×C×p×q features, got {F_s.shape}")
    cos = cosine_similarity(F_s, Tensor(F_w), axis=1)
    return cos.mean(axis=(1, 2))


def p2p_similarity(F_s: Tensor, F_w) -> Tensor:
    """S_p2p for a single C×p×q pair (0-d tensor)."""
    if F_s.ndim != 3:
        raise ContractError(f"expected C×p×q features, got {F_s.shape}")
    F_w = _const(F_w)
    if F_w.shape != F_s.shape:
        raise ContractError(f"p2p shape mismatch: {F_s.shape} vs {F_w.shape}")
    return p2p_similarities(F_s.reshape((1,) + F_s.shape), F_w[None]).reshape(())


def p2p_loss(similarities) -> Tensor:
    """1 - mean(S_p2p) over the unlabeled batch."""
    if isinstance(similarities, Tensor):
        sims = similarities
    else:
        similarities = list(similarities)
        if not similarities:
            raise ContractError("p2p_loss needs a non-empty batch")
        sims = stack_scalars([s if isinstance(s, Tensor) else Tensor(s) for s in similarities])
    if sims.data.size == 0:
        raise ContractError("p2p_loss needs a non-empty batch")
    return 1.0 - sims.mean()


# -- class feature sets ------------------------------------------------------------

def pseudo_label_grid(p_w, grid: tuple[int, int]) -> np.ndarray:
    """Argmax of B×Z×H×W probabilities, nearest-neighbour downsampled to B×p×q.

    Feature cell (i, j) takes the label of pixel (i*H/p, j*W/q). Ties in the argmax go to
    the lowest class index.
    """
    probs = _const(p_w)
    labels = probs.argmax(axis=1)
    H, W = labels.shape[1:]
    p, q = grid
    if H % p or W % q:
        raise ContractError(f"prediction size {H}×{W} is not a multiple of the feature grid {p}×{q}")
    return labels[:, :: H // p, :: W // q]


@dataclass
class ClassFeatureSets:
    """Per class k: flat positions, weak features W_k (constant) and strong features S_k."""

    num_classes: int
    positions: dict[int, np.ndarray] = field(default_factory=dict)
    weak: dict[int, np.ndarray] = field(default_factory=dict)
    strong: dict[int, Tensor] = field(default_factory=dict)

    def count(self, k: int) -> int:
        return 0 if k not in self.positions else len(self.positions[k])


def class_feature_sets(F_w, F_s: Tensor, p_w) -> ClassFeatureSets:
    """Gather features at positions pseudo-labeled k, for every class present.

    Accepts a single image (C×p×q with Z×H×W predictions) or a batch; positions are
    flattened in (image, row, column) order.
    """
    F_w = _const(F_w, F_s.dtype)
    probs = _const(p_w)
    if F_s.ndim == 3:
        F_s = F_s.reshape((1,) + F_s.shape)
        F_w = F_w[None]
        probs = probs[None]
    if F_w.shape != F_s.shape:
        raise ContractError(f"feature shape mismatch: {F_w.shape} vs {F_s.shape}")
    B, C, p, q = F_s.shape
    Z = probs.shape[1]
    labels = pseudo_label_grid(probs, (p, q)).reshape(-1)
    flat_w = F_w.transpose(0, 2, 3, 1).reshape(-1, C)
    flat_s = F_s.transpose(0, 2, 3, 1).reshape(-1, C)
    sets = ClassFeatureSets(Z)
    for k in range(Z):
        pos = np.flatnonzero(labels == k)
        if pos.size:
            sets.positions[k] = pos
            sets.weak[k] = flat_w[pos]
            sets.strong[k] = flat_s[pos]
    return sets


# -- selections ------------------------------------------------------------------

def _prototype_order(feats: np.ndarray, rho: np.ndarray, descending: bool) -> np.ndarray:
    cos = cosine_matrix(feats, rho[None, :])[:, 0]
    # stable sort: equal cosines keep ascending position order
    return np.argsort(-cos if descending else cos, kind="stable")


def select_intra(W_k, rho: np.ndarray, n_r: int, initialized: bool = True) -> np.ndarray | None:
    """The min(n_r, |W_k|) weak features most similar to the prototype; ``None`` means skip."""
    if not initialized:
        return None
    feats = _const(W_k)
    if len(feats) == 0:
        return feats[:0]
    return feats[_prototype_order(feats, np.asarray(rho), True)[: min(n_r, len(feats))]]


def select_outliers(S_k: Tensor, rho: np.ndarray, n_d: int, initialized: bool = True) -> Tensor | None:
    """The min(n_d, |S_k|) strong features least similar to the prototype (gradient kept)."""
    if not initialized:
        return None
    if S_k.shape[0] == 0:
        return S_k
    order = _prototype_order(S_k.data, np.asarray(rho), False)[: min(n_d, S_k.shape[0])]
    return S_k[order]


@dataclass
class CompactnessSelection:
    intra: dict[int, np.ndarray]
    outliers: dict[int, Tensor]
    n_r: int = DEFAULT_N_R
    n_d: int = DEFAULT_N_D


def select_compact(sets: ClassFeatureSets, bank: "PrototypeBank", n_r: int, n_d: int) -> CompactnessSelection:
    intra, outliers = {}, {}
    for k in sorted(sets.positions):
        if not bank.initialized[k]:
            continue
        rho = bank.prototypes[k]
        m_in = select_intra(sets.weak[k], rho, n_r)
        m_dis = select_outliers(sets.strong[k], rho, n_d)
        if len(m_in) and m_dis.shape[0]:
            intra[k], outliers[k] = m_in, m_dis
    return CompactnessSelection(intra, outliers, n_r, n_d)


def nearest_intra(outliers: np.ndarray, intra: np.ndarray) -> np.ndarray:
    """Index of the most cosine-similar intra feature for every outlier (first on ties)."""
    return cosine_matrix(outliers, intra).argmax(axis=1)


def outlier_loss(selection: CompactnessSelection, dtype=np.float64) -> Tensor:
    """Mean over eligible classes of mean_h (1 - cos(h, r*(h)))."""
    terms = []
    for k in sorted(selection.outliers):
        m_in = selection.intra.get(k)
        m_dis = selection.outliers[k]
        if m_in is None or len(m_in) == 0 or m_dis.shape[0] == 0:
            continue
        targets = m_in[nearest_intra(m_dis.data, m_in)].astype(m_dis.dtype, copy=False)
        cos = cosine_similarity(m_dis, Tensor(targets), axis=1)
        terms.append((1.0 - cos).mean())
    if not terms:
        return Tensor(np.zeros((), dtype=dtype))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


# -- prototype bank ----------------------------------------------------------------

@dataclass
class PrototypeBank:
    prototypes: np.ndarray
    initialized: np.ndarray
    momentum: float = DEFAULT_MOMENTUM
    version: int = 0

    @classmethod
    def empty(cls, num_classes: int, channels: int, momentum: float = DEFAULT_MOMENTUM,
              dtype=np.float64) -> "PrototypeBank":
        return cls(np.zeros((num_classes, channels), dtype=dtype),
                   np.zeros(num_classes, dtype=bool), momentum)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.prototypes.copy(), self.initialized.copy(), self.momentum, self.version)


def update_prototypes(bank: PrototypeBank, sets: ClassFeatureSets) -> PrototypeBank:
    """EMA update from the batch means of W_k; a class's first observation initialises it."""
    new = bank.copy()
    eta = bank.momentum
    for k, feats in sets.weak.items():
        if len(feats) == 0:
            continue
        mu = np.asarray(feats, dtype=np.float64).mean(axis=0).astype(new.prototypes.dtype)
        if new.initialized[k]:
            new.prototypes[k] = eta * new.prototypes[k] + (1.0 - eta) * mu
        else:
            new.prototypes[k] = mu
            new.initialized[k] = True
    new.version = bank.version + 1
    return new
