"""Toy encoder/decoder: three 3×3 convs (total stride 4) and a 1×1 classifier with ×4 bilinear upsampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Tensor, bilinear_upsample, conv2d, no_grad, relu, softmax

STRIDE = 4


@dataclass
class EncoderParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @property
    def channels(self) -> int:
        return self.w3.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


@dataclass
class DecoderParams:
    w: Tensor
    b: Tensor
    upsample: int = STRIDE

    @property
    def num_classes(self) -> int:
        return self.w.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b]


# fixed checkpoint order
PARAM_NAMES = ("enc.w1", "enc.b1", "enc.w2", "enc.b2", "enc.w3", "enc.b3", "dec.w", "dec.b")


def all_tensors(enc: EncoderParams, dec: DecoderParams) -> list[Tensor]:
    return enc.tensors() + dec.tensors()


def params_from_arrays(arrays: dict[str, np.ndarray]) -> tuple[EncoderParams, DecoderParams]:
    t = {k: Tensor(np.array(arrays[k]), requires_grad=True) for k in PARAM_NAMES}
    enc = EncoderParams(t["enc.w1"], t["enc.b1"], t["enc.w2"], t["enc.b2"], t["enc.w3"], t["enc.b3"])
    return enc, DecoderParams(t["dec.w"], t["dec.b"])


def params_to_arrays(enc: EncoderParams, dec: DecoderParams) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in zip(PARAM_NAMES, all_tensors(enc, dec))}


def init_params(
    seed: int,
    scale: float = 1.0,
    channels: int = 32,
    num_classes: int = 4,
    hidden: tuple[int, int] = (16, 32),
    in_channels: int = 3,
    dtype=np.float64,
) -> tuple[EncoderParams, DecoderParams]:
    """Weights ~ U(-scale/sqrt(fan_in), scale/sqrt(fan_in)), biases zero."""
    if scale <= 0:
        raise ContractError("init scale must be positive")
    rng = np.random.default_rng(seed)

    def weight(cout, cin, k):
        bound = scale / np.sqrt(cin * k * k)
        return Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)).astype(dtype), requires_grad=True)

    def bias(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    h1, h2 = hidden
    enc = EncoderParams(
        weight(h1, in_channels, 3), bias(h1),
        weight(h2, h1, 3), bias(h2),
        weight(channels, h2, 3), bias(channels),
    )
    dec = DecoderParams(weight(num_classes, channels, 1), bias(num_classes))
    return enc, dec


def encode(images: Tensor, p: EncoderParams) -> Tensor:
    """B×3×H×W images -> B×C×H/4×W/4 non-negative features."""
    if images.ndim != 4:
        raise ContractError(f"encode expects B×3×H×W, got {images.shape}")
    H, W = images.shape[2:]
    if H % STRIDE or W % STRIDE:
        raise ContractError(f"image size {H}×{W} not divisible by {STRIDE}")
    x = relu(conv2d(images, p.w1, p.b1, stride=1, padding=1))
    x = relu(conv2d(x, p.w2, p.b2, stride=2, padding=1))
    return relu(conv2d(x, p.w3, p.b3, stride=2, padding=1))


def decode_logits(features: Tensor, p: DecoderParams) -> Tensor:
    """B×C×p×q features -> B×Z×(4p)×(4q) upsampled logits."""
    if features.ndim != 4 or features.shape[1] != p.w.shape[1]:
        raise ContractError(f"decoder expects B×{p.w.shape[1]}×p×q features, got {features.shape}")
    return bilinear_upsample(conv2d(features, p.w, p.b), p.upsample)


def decode(features: Tensor, p: DecoderParams) -> Tensor:
    return softmax(decode_logits(features, p), axis=1)


def predict(images: np.ndarray, enc: EncoderParams, dec: DecoderParams, batch: int = 32) -> np.ndarray:
    """Argmax label maps for a B×3×H×W array, without building a graph."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            x = Tensor(images[i:i + batch].astype(enc.w1.dtype, copy=False))
            out.append(decode_logits(encode(x, enc), dec).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.int64)
