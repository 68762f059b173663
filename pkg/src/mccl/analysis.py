"""Strong/weak feature similarity versus prediction agreement, binned per pixel."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import data as D
from .errors import ContractError
from .segnet import STRIDE, DecoderParams, EncoderParams, decode_logits, encode
from .tensor import Tensor, cosine_similarity, no_grad

SPAN_TOL = 1e-9


@dataclass
class SimilarityHistogram:
    edges: np.ndarray
    pixel_ratio: np.ndarray
    agreement_ratio: np.ndarray  # NaN for empty bins
    counts: np.ndarray
    raw_min: float
    raw_max: float

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "lo", "hi", "pixels", "pixel_ratio", "agreement_ratio"])
        for b in range(len(self.counts)):
            agree = self.agreement_ratio[b]
            w.writerow([b, f"{self.edges[b]:.6g}", f"{self.edges[b + 1]:.6g}", int(self.counts[b]),
                        f"{self.pixel_ratio[b]:.12g}", "nan" if agree != agree else f"{agree:.12g}"])
        return buf.getvalue()


def view_pairs(images: np.ndarray, seed: int, photometric: bool = True) -> list[D.ViewPair]:
    pairs = []
    for i, img in enumerate(images):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        pair = D.make_view_pair(img, rng)
        if not photometric:
            pair = D.ViewPair(pair.u_w, pair.u_w.copy(), pair.geo, D.IDENTITY_PHOTOMETRIC)
        pairs.append(pair)
    return pairs


def pixel_similarity_and_agreement(
    enc: EncoderParams, dec: DecoderParams, pairs: list[D.ViewPair], batch: int = 32,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per pixel: strong/weak feature cosine (feature cell broadcast to its 4×4 block),
    whether the argmax predictions agree, and per image S_p2p."""
    sims, agree, s_p2p = [], [], []
    dtype = enc.w1.dtype
    with no_grad():
        for i in range(0, len(pairs), batch):
            chunk = pairs[i:i + batch]
            u_w = D.to_nchw(np.stack([p.u_w for p in chunk])).astype(dtype)
            u_s = D.to_nchw(np.stack([p.u_s for p in chunk])).astype(dtype)
            F_w = encode(Tensor(u_w), enc)
            F_s = encode(Tensor(u_s), enc)
            cos = cosine_similarity(F_s, F_w, axis=1).data
            s_p2p.append(cos.mean(axis=(1, 2)))
            pred_w = decode_logits(F_w, dec).data.argmax(axis=1)
            pred_s = decode_logits(F_s, dec).data.argmax(axis=1)
            sims.append(np.repeat(np.repeat(cos, STRIDE, axis=1), STRIDE, axis=2).reshape(-1))
            agree.append((pred_w == pred_s).reshape(-1))
    return np.concatenate(sims), np.concatenate(agree), np.concatenate(s_p2p)


def histogram_from_pixels(sims: np.ndarray, agree: np.ndarray, bins: int) -> SimilarityHistogram:
    if bins < 1:
        raise ContractError("bins must be >= 1")
    lo, hi = float(sims.min()), float(sims.max())
    # a spread at round-off level is a constant similarity, not a range to stretch
    norm = (sims - lo) / (hi - lo) if hi - lo > SPAN_TOL else np.ones_like(sims)
    idx = np.minimum((norm * bins).astype(int), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    agreed = np.bincount(idx, weights=agree.astype(float), minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        agreement = np.where(counts > 0, agreed / np.maximum(counts, 1), np.nan)
    return SimilarityHistogram(np.linspace(0.0, 1.0, bins + 1), counts / counts.sum(), agreement,
                               counts, lo, hi)


def similarity_histogram(
    enc: EncoderParams, dec: DecoderParams, images: np.ndarray, bins: int = 10,
    seed: int = 0, photometric: bool = True,
) -> SimilarityHistogram:
    """Min-max normalised strong/weak cosine per pixel, binned, with per-bin prediction agreement.

    ``images`` is an N×H×W×3 array; each image gets one seeded weak/strong view pair.
    """
    if len(images) == 0:
        raise ContractError("similarity_histogram needs at least one sample")
    sims, agree, _ = pixel_similarity_and_agreement(enc, dec, view_pairs(images, seed, photometric))
    return histogram_from_pixels(sims, agree, bins)


def mean_s_p2p(enc: EncoderParams, dec: DecoderParams, images: np.ndarray, seed: int = 0) -> float:
    if len(images) == 0:
        raise ContractError("need at least one image")
    _, _, s = pixel_similarity_and_agreement(enc, dec, view_pairs(images, seed))
    return float(s.mean())
