"""Synthetic shape scenes, labeled/unlabeled splits and the two augmentation pipelines."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .serialization import load_tensor, save_tensor

SHAPE_KINDS = ("circle", "rectangle", "triangle")

# mean RGB per class; class 0 is background. Extra classes fall back to seeded colours.
DEFAULT_PALETTE = (
    (0.50, 0.50, 0.50),
    (0.85, 0.20, 0.20),
    (0.20, 0.75, 0.25),
    (0.25, 0.30, 0.85),
)


@dataclass(frozen=True)
class DatasetSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    shapes_per_image: tuple[int, int] = (2, 4)
    palette: tuple[tuple[float, float, float], ...] = DEFAULT_PALETTE
    color_jitter: float = 0.06
    illumination: float = 0.45
    noise: float = 0.10
    n_samples: int = 400
    n_val: int = 100
    seed: int = 0
    stride: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.height % self.stride or self.width % self.stride:
            raise ContractError(f"image size must be divisible by the encoder stride {self.stride}")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ContractError(f"invalid shapes_per_image range {self.shapes_per_image}")

    def class_colors(self) -> np.ndarray:
        colors = np.zeros((self.num_classes, 3))
        n = min(len(self.palette), self.num_classes)
        colors[:n] = np.asarray(self.palette[:n], dtype=float)
        if self.num_classes > n:
            rng = np.random.default_rng([self.seed, 7919])
            colors[n:] = rng.uniform(0.2, 0.8, size=(self.num_classes - n, 3))
        return colors

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["shapes_per_image"] = list(self.shapes_per_image)
        d["palette"] = [list(c) for c in self.palette]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        if "shapes_per_image" in d:
            d["shapes_per_image"] = tuple(d["shapes_per_image"])
        if "palette" in d:
            d["palette"] = tuple(tuple(c) for c in d["palette"])
        return cls(**d)


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _shape_mask(kind: str, rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    size = rng.uniform(0.12, 0.3) * min(H, W)
    cy = rng.uniform(0.1, 0.9) * H
    cx = rng.uniform(0.1, 0.9) * W
    if kind == "circle":
        return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= size**2
    if kind == "rectangle":
        hh = size * rng.uniform(0.6, 1.0)
        hw = size * rng.uniform(0.6, 1.0)
        return (np.abs(yy + 0.5 - cy) <= hh) & (np.abs(xx + 0.5 - cx) <= hw)
    # triangle: three vertices on a jittered circle, half-plane test
    angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, 3)
    vy = cy + 1.3 * size * np.sin(angles)
    vx = cx + 1.3 * size * np.cos(angles)
    py, px = yy + 0.5, xx + 0.5
    signs = []
    for a in range(3):
        b = (a + 1) % 3
        signs.append((vx[b] - vx[a]) * (py - vy[a]) - (vy[b] - vy[a]) * (px - vx[a]))
    s = np.stack(signs)
    return np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)


def generate_scene(seed: int, spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render one scene. Returns a float32 H×W×3 image in [0, 1] and an int64 H×W label map."""
    rng = np.random.default_rng(seed)
    H, W, Z = spec.height, spec.width, spec.num_classes
    colors = spec.class_colors()
    labels = np.zeros((H, W), dtype=np.int64)
    image = np.empty((H, W, 3))
    image[:] = colors[0] + rng.normal(0.0, spec.color_jitter, 3)

    lo, hi = spec.shapes_per_image
    n_shapes = int(rng.integers(lo, hi + 1))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, Z))
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        mask = _shape_mask(kind, rng, H, W)
        image[mask] = colors[cls] + rng.normal(0.0, spec.color_jitter, 3)
        labels[mask] = cls

    gain = 1.0 + rng.uniform(-spec.illumination, spec.illumination, 3)
    bias = rng.uniform(-spec.illumination, spec.illumination, 3) * 0.5
    image = image * gain + bias
    image += rng.normal(0.0, spec.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    images: np.ndarray  # N×H×W×3 float32
    labels: np.ndarray  # N×H×W int64
    train_ids: np.ndarray
    val_ids: np.ndarray

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images[self.train_ids], self.labels[self.train_ids]

    def val(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images[self.val_ids], self.labels[self.val_ids]


def build_dataset(spec: DatasetSpec) -> SyntheticDataset:
    n = spec.n_samples + spec.n_val
    images = np.empty((n, spec.height, spec.width, 3), dtype=np.float32)
    labels = np.empty((n, spec.height, spec.width), dtype=np.int64)
    for i in range(n):
        images[i], labels[i] = generate_scene(derive_seed(spec.seed, i), spec)
    return SyntheticDataset(spec, images, labels,
                            np.arange(spec.n_samples), np.arange(spec.n_samples, n))


def save_dataset(ds: SyntheticDataset, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(ds.images)
    meta = {
        "spec": ds.spec.to_dict(),
        "seeds": {"master": ds.spec.seed, "per_sample": [derive_seed(ds.spec.seed, i) for i in range(n)]},
        "counts": {"train": int(len(ds.train_ids)), "val": int(len(ds.val_ids)), "total": n},
        "train_ids": ds.train_ids.tolist(),
        "val_ids": ds.val_ids.tolist(),
        "class_names": ["background"] + [f"class_{k}" for k in range(1, ds.spec.num_classes)],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for i in range(n):
        save_tensor(out / f"img_{i:06d}", ds.images[i])
        save_tensor(out / f"lbl_{i:06d}", ds.labels[i])
    return out


def load_dataset(path: str | Path) -> SyntheticDataset:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    spec = DatasetSpec.from_dict(meta["spec"])
    n = meta["counts"]["total"]
    images = np.stack([load_tensor(path / f"img_{i:06d}") for i in range(n)])
    labels = np.stack([load_tensor(path / f"lbl_{i:06d}") for i in range(n)])
    return SyntheticDataset(spec, images, labels,
                            np.asarray(meta["train_ids"]), np.asarray(meta["val_ids"]))


@dataclass(frozen=True)
class SplitManifest:
    ids: tuple[int, ...]
    labeled: tuple[int, ...]
    unlabeled: tuple[int, ...]
    seed: int


def make_split(n_total: int, n_labeled: int, seed: int) -> SplitManifest:
    if not 0 < n_labeled <= n_total:
        raise ContractError(f"need 0 < n_labeled <= n_total, got {n_labeled} of {n_total}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n_total, size=n_labeled, replace=False))
    rest = np.setdiff1d(np.arange(n_total), chosen)
    return SplitManifest(tuple(range(n_total)), tuple(int(i) for i in chosen),
                         tuple(int(i) for i in rest), seed)


# -- augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class GeoTransform:
    hflip: bool = False
    vflip: bool = False


@dataclass(frozen=True)
class Photometric:
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gray: bool = False
    blur_sigma: float | None = None


IDENTITY_PHOTOMETRIC = Photometric()


@dataclass
class ViewPair:
    u_w: np.ndarray
    u_s: np.ndarray
    geo: GeoTransform
    photometric: Photometric = field(default_factory=Photometric)


def sample_geo(rng: np.random.Generator) -> GeoTransform:
    return GeoTransform(bool(rng.random() < 0.5), bool(rng.random() < 0.5))


def weak_view(image: np.ndarray, geo: GeoTransform) -> np.ndarray:
    """Flip an H×W×... array per ``geo``; also used for label maps."""
    out = image
    if geo.hflip:
        out = out[:, ::-1]
    if geo.vflip:
        out = out[::-1]
    return np.ascontiguousarray(out)


def sample_photometric(rng: np.random.Generator) -> Photometric:
    scale = tuple(float(v) for v in rng.uniform(0.6, 1.4, 3))
    shift = tuple(float(v) for v in rng.uniform(-0.2, 0.2, 3))
    gray = bool(rng.random() < 0.2)
    blur = float(rng.uniform(0.1, 2.0)) if rng.random() < 0.5 else None
    return Photometric(scale, shift, gray, blur)


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of an H×W×C image with half-sample symmetric padding.

    A symmetric kernel under this padding preserves the image sum exactly (up to rounding).
    """
    H, W = image.shape[:2]
    radius = min(max(1, math.ceil(3.0 * sigma)), H - 1, W - 1)
    k = gaussian_kernel(sigma, radius)
    out = image.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="symmetric")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for t, wt in enumerate(k):
            acc += wt * np.take(padded, np.arange(t, t + n), axis=axis)
        out = acc
    return out


def apply_photometric(image: np.ndarray, photo: Photometric) -> np.ndarray:
    out = image.astype(np.float64) * np.asarray(photo.scale) + np.asarray(photo.shift)
    if photo.gray:
        out = np.repeat(out.mean(axis=-1, keepdims=True), 3, axis=-1)
    if photo.blur_sigma is not None:
        out = gaussian_blur(out, photo.blur_sigma)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def strong_view(image: np.ndarray, geo: GeoTransform, seed: int | Photometric) -> np.ndarray:
    """Same flips as :func:`weak_view`, then colour jitter / graying / blur drawn from ``seed``.

    Passing a :class:`Photometric` instead of a seed applies those parameters directly.
    """
    photo = seed if isinstance(seed, Photometric) else sample_photometric(np.random.default_rng(seed))
    return apply_photometric(weak_view(image, geo), photo)


def make_view_pair(image: np.ndarray, rng: np.random.Generator) -> ViewPair:
    geo = sample_geo(rng)
    photo = sample_photometric(rng)
    u_w = weak_view(image, geo)
    return ViewPair(u_w, apply_photometric(u_w, photo), geo, photo)


def to_nchw(images: np.ndarray) -> np.ndarray:
    """N×H×W×3 -> N×3×H×W."""
    return np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))
