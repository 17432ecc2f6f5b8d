"""Foreground masking, physical-resolution resampling, patch sampling and augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .fusion import SoftLabelMap

WORKING_SPACING = 1.392  # µm/px


@dataclass
class RasterImage:
    pixels: np.ndarray  # H x W x 3, float in [0, 1]
    pixel_spacing: float = WORKING_SPACING

    def __post_init__(self):
        if self.pixel_spacing <= 0:
            raise ValueError("pixel spacing must be positive")
        self.pixels = np.clip(np.asarray(self.pixels, dtype=np.float64), 0.0, 1.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass
class ForegroundMask:
    mask: np.ndarray
    threshold: int


def read_png(path: str | Path, spacing: float = WORKING_SPACING) -> RasterImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return RasterImage(arr, spacing)


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


# ------------------------------------------------------------------- Otsu

def otsu_threshold(histogram) -> int:
    """Threshold ``t`` maximizing between-class variance for the split ``<= t | > t``.

    Only thresholds between the first and last occupied bin are candidates,
    so a single-bin histogram returns that bin.  Ties go to the smallest
    ``t``.  Scores are compared exactly (rational arithmetic).
    """
    hist = [Fraction(v) for v in np.asarray(histogram).ravel().tolist()]
    if any(v < 0 for v in hist):
        raise ValueError("histogram counts must be non-negative")
    occupied = [i for i, v in enumerate(hist) if v > 0]
    if not occupied:
        raise ValueError("empty histogram")
    lo, hi = occupied[0], occupied[-1]
    total = sum(hist)
    total_sum = sum(i * v for i, v in enumerate(hist))
    best_t, best = lo, Fraction(-1)
    n0 = s0 = Fraction(0)
    for t in range(hi + 1):
        n0 += hist[t]
        s0 += t * hist[t]
        if t < lo:
            continue
        n1 = total - n0
        # n0 * n1 * (mu0 - mu1)^2, scaled by total^2 which is constant
        score = (s0 * n1 - (total_sum - s0) * n0) ** 2 / (n0 * n1) if n0 and n1 else Fraction(0)
        if score > best:
            best, best_t = score, t
    return best_t


def luminance_u8(pixels: np.ndarray) -> np.ndarray:
    lum = pixels[..., 0] * 0.2126 + pixels[..., 1] * 0.7152 + pixels[..., 2] * 0.0722
    return np.clip(np.rint(lum * 255.0), 0, 255).astype(np.uint8)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy ** 2 + xx ** 2 <= r * r


def binary_close(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilate then erode with a disk; pixels outside the image are ignored."""
    se = disk(radius)
    d = ndimage.binary_dilation(mask, se, border_value=0)
    return ndimage.binary_erosion(d, se, border_value=1)


def binary_open(mask: np.ndarray, radius: int) -> np.ndarray:
    se = disk(radius)
    e = ndimage.binary_erosion(mask, se, border_value=1)
    return ndimage.binary_dilation(e, se, border_value=0)


def foreground_mask(image: RasterImage | np.ndarray, radius: int = 5,
                    tissue_darker: bool = True) -> ForegroundMask:
    """Otsu tissue detection followed by closing and opening with a disk."""
    pixels = image.pixels if isinstance(image, RasterImage) else np.asarray(image, float)
    q = luminance_u8(pixels)
    hist = np.bincount(q.ravel(), minlength=256)
    t = otsu_threshold(hist)
    if np.count_nonzero(hist) < 2:
        # a uniform image has no tissue/background split
        return ForegroundMask(np.zeros(q.shape, bool), t)
    tissue = q <= t if tissue_darker else q > t
    if radius > 0:
        tissue = binary_open(binary_close(tissue, radius), radius)
    return ForegroundMask(tissue, t)


# ------------------------------------------------------------- resampling

def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x, dtype=np.float64)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = (a + 2) * x[near] ** 3 - (a + 3) * x[near] ** 2 + 1
    out[far] = a * x[far] ** 3 - 5 * a * x[far] ** 2 + 8 * a * x[far] - 4 * a
    return out


def _resample_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    scale = n_out / n_in
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    base = np.floor(centers).astype(int)
    m = np.zeros((n_out, n_in))
    taps = np.arange(-1, 3)
    weights = cubic_kernel(centers[:, None] - (base[:, None] + taps), a)
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(base[:, None] + taps, 0, n_in - 1)
    for k in range(4):
        np.add.at(m, (np.arange(n_out), idx[:, k]), weights[:, k])
    return m


def resample_bicubic(image: RasterImage, target_spacing: float = WORKING_SPACING) -> RasterImage:
    """Separable Catmull-Rom resampling to a new physical pixel size (edge-clamped)."""
    if target_spacing <= 0:
        raise ValueError("target spacing must be positive")
    if target_spacing == image.pixel_spacing:
        return RasterImage(image.pixels.copy(), image.pixel_spacing)
    s = image.pixel_spacing / target_spacing
    h, w = image.shape
    h_out, w_out = max(1, int(round(h * s))), max(1, int(round(w * s)))
    my, mx = _resample_matrix(h, h_out), _resample_matrix(w, w_out)
    out = np.einsum("ij,jkc,lk->ilc", my, image.pixels, mx)
    return RasterImage(np.clip(out, 0.0, 1.0), target_spacing)


# ---------------------------------------------------------------- patches

def _pad_to(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ph, pw = max(0, size - h), max(0, size - w)
    if not ph and not pw:
        return arr
    pad = [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)] + [(0, 0)] * (arr.ndim - 2)
    mode = "reflect" if h > 1 and w > 1 and ph < h and pw < w else "symmetric"
    return np.pad(arr, pad, mode=mode)


def pad_labels(labels: SoftLabelMap, size: int) -> SoftLabelMap:
    return SoftLabelMap(_pad_to(labels.probs, size), _pad_to(labels.foreground, size),
                        _pad_to(labels.ambiguous, size), labels.level, labels.annotator_count)


def sample_patch(image: np.ndarray, labels: SoftLabelMap, size: int, rng: np.random.Generator,
                 max_attempts: int = 100) -> tuple[np.ndarray, SoftLabelMap]:
    """Random crop that contains foreground, retrying up to ``max_attempts`` times."""
    image = _pad_to(np.asarray(image), size)
    labels = pad_labels(labels, size)
    h, w = image.shape[:2]
    best, best_count = None, -1
    for _ in range(max_attempts):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        count = int(labels.foreground[top:top + size, left:left + size].sum())
        if count > best_count:
            best, best_count = (top, left), count
        if count > 0:
            break
    top, left = best
    return image[top:top + size, left:left + size].copy(), labels.crop(top, left, size, size)


def central_offset(h: int, w: int, size: int) -> tuple[int, int]:
    return max(0, (h - size) // 2), max(0, (w - size) // 2)


def central_patch(image: np.ndarray, size: int, labels: SoftLabelMap | None = None):
    """Central ``size x size`` crop (offset floors toward the top-left)."""
    image = _pad_to(np.asarray(image), size)
    top, left = central_offset(*image.shape[:2], size)
    patch = image[top:top + size, left:left + size].copy()
    if labels is None:
        return patch
    return patch, pad_labels(labels, size).crop(top, left, size, size)


# ----------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentDraw:
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentDraw":
        return cls(
            hflip=bool(rng.random() < 0.5),
            vflip=bool(rng.random() < 0.5),
            rot90=int(rng.integers(0, 4)),
            scale=tuple(rng.uniform(0.9, 1.1, 3).tolist()),
            offset=tuple(rng.uniform(-0.05, 0.05, 3).tolist()),
        )


def _geometric(arr: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    if draw.hflip:
        arr = arr[:, ::-1]
    if draw.vflip:
        arr = arr[::-1]
    return np.ascontiguousarray(np.rot90(arr, draw.rot90, axes=(0, 1)))


def apply_augmentation(patch: np.ndarray, labels: SoftLabelMap | None, draw: AugmentDraw):
    out = _geometric(np.asarray(patch, dtype=np.float64), draw)
    out = np.clip(out * np.asarray(draw.scale) + np.asarray(draw.offset), 0.0, 1.0)
    if labels is None:
        return out, None
    lab = SoftLabelMap(_geometric(labels.probs, draw), _geometric(labels.foreground, draw),
                       _geometric(labels.ambiguous, draw), labels.level, labels.annotator_count)
    return out, lab


def augment_light(patch: np.ndarray, labels: SoftLabelMap | None, rng: np.random.Generator):
    """Random flips, 90° rotations and per-channel affine color jitter."""
    return apply_augmentation(patch, labels, AugmentDraw.sample(rng))
