"""Whole-image prediction with Gaussian-weighted sliding windows, remapping and overlays."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .fusion import SoftLabelMap
from .imaging import _pad_to
from .model import MiniUNet, predict_proba
from .ontology import Ontology, remap_up

WEIGHT_FLOOR = 1e-3

# maps an N x 3 x h x w batch to N x C x h x w probabilities
PredictFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class PredictiveMap:
    probs: np.ndarray  # H x W x C, rows on the simplex
    level: str
    foreground: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return self.probs.shape[-1]

    def masked(self) -> np.ndarray:
        """Probabilities with background pixels zeroed (presentation only)."""
        if self.foreground is None:
            return self.probs
        return self.probs * self.foreground[..., None]

    def argmax(self) -> np.ndarray:
        return self.probs.argmax(axis=-1)


def _as_predict_fn(model: MiniUNet | PredictFn) -> PredictFn:
    if isinstance(model, MiniUNet):
        return lambda batch: predict_proba(model, batch)
    return model


def tile_starts(length: int, window: int, stride: int) -> list[int]:
    """Start offsets on a regular grid; the last tile is shifted to end at the edge."""
    if length <= window:
        return [0]
    starts = list(range(0, length - window, stride))
    starts.append(length - window)
    return sorted(set(starts))


def gaussian_weight(window: int, sigma_frac: float = 0.125, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    sigma = sigma_frac * window
    x = np.arange(window) - (window - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return np.maximum(np.outer(g, g), floor)


def sliding_window_predict(model: Union[MiniUNet, PredictFn], image: np.ndarray, window: int = 512,
                           overlap: float = 0.5, sigma_frac: float = 0.125, level: str = "explanation",
                           foreground: np.ndarray | None = None, batch_size: int = 4,
                           threads: int = 1) -> PredictiveMap:
    """Predict an ``H x W x 3`` image tile by tile and blend with a Gaussian weight.

    Tiles are evaluated (optionally in a thread pool) and then accumulated
    in grid order, so the result does not depend on scheduling.
    """
    if window <= 0 or window % 2:
        raise ValueError("window must be a positive even number")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    image = np.asarray(image, dtype=np.float64)
    h0, w0 = image.shape[:2]
    padded = _pad_to(image, window)
    top0 = (padded.shape[0] - h0) // 2
    left0 = (padded.shape[1] - w0) // 2
    h, w = padded.shape[:2]
    stride = max(1, int(round(window * (1.0 - overlap))))
    tiles = [(y, x) for y in tile_starts(h, window, stride) for x in tile_starts(w, window, stride)]
    fn = _as_predict_fn(model)

    def run(chunk):
        batch = np.stack([padded[y:y + window, x:x + window].transpose(2, 0, 1) for y, x in chunk])
        return np.asarray(fn(batch), dtype=np.float64)

    chunks = [tiles[i:i + batch_size] for i in range(0, len(tiles), batch_size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            outputs = list(pool.map(run, chunks))
    else:
        outputs = [run(c) for c in chunks]

    weight = gaussian_weight(window, sigma_frac)
    acc = None
    wsum = np.zeros((h, w))
    for chunk, out in zip(chunks, outputs):
        for (y, x), probs in zip(chunk, out):
            if acc is None:
                acc = np.zeros((h, w, probs.shape[0]))
            acc[y:y + window, x:x + window] += weight[..., None] * probs.transpose(1, 2, 0)
            wsum[y:y + window, x:x + window] += weight
    probs = (acc / wsum[..., None])[top0:top0 + h0, left0:left0 + w0]
    return PredictiveMap(probs, level, foreground)


def predict_remapped(pred: PredictiveMap, ontology: Ontology, target: str) -> PredictiveMap:
    if target == pred.level:
        return PredictiveMap(pred.probs.copy(), pred.level, pred.foreground)
    return PredictiveMap(remap_up(pred.probs, ontology, pred.level, target), target, pred.foreground)


def render_overlay(image: np.ndarray, label_map: PredictiveMap | SoftLabelMap, ontology: Ontology,
                   alpha: float = 0.5) -> np.ndarray:
    """Tint foreground pixels with the ontology colour of their argmax class.

    Benign and background pixels keep the original bytes.  Returns ``uint8``.
    """
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    probs = label_map.probs
    colors = ontology.colors(label_map.level)
    if probs.shape[-1] != len(colors):
        raise ValueError(f"map has {probs.shape[-1]} classes, level {label_map.level!r} has {len(colors)} colours")
    if probs.shape[:2] != img.shape[:2]:
        raise ValueError("map and image sizes differ")
    cls = probs.argmax(axis=-1)
    paint = cls != 0
    if label_map.foreground is not None:
        paint &= np.asarray(label_map.foreground, bool)
    out = img.copy()
    blend = (1.0 - alpha) * img[paint].astype(np.float64) + alpha * colors[cls[paint]].astype(np.float64)
    out[paint] = np.clip(np.rint(blend), 0, 255).astype(np.uint8)
    return out
