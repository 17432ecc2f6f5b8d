"""Fusion of per-annotator masks: soft labels, majority vote and STAPLE."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .annotations import AnnotatorMask
from .ontology import LEVELS, Ontology, level_index, remap_up

# fractional votes are compared with this tolerance when looking for ties
VOTE_TOL = 1e-9


class StapleWarning(UserWarning):
    pass


@dataclass
class SoftLabelMap:
    """Per-pixel class distribution ``H x W x C`` with foreground/ambiguity masks."""

    probs: np.ndarray
    foreground: np.ndarray
    ambiguous: np.ndarray
    level: str
    annotator_count: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[:2]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[-1]

    def crop(self, top: int, left: int, h: int, w: int) -> "SoftLabelMap":
        sl = (slice(top, top + h), slice(left, left + w))
        return SoftLabelMap(self.probs[sl].copy(), self.foreground[sl].copy(),
                            self.ambiguous[sl].copy(), self.level, self.annotator_count)

    def remap(self, ontology: Ontology, target: str) -> "SoftLabelMap":
        """Remap to a coarser level; ambiguity is recomputed at the new level."""
        if target == self.level:
            return self
        probs = remap_up(self.probs, ontology, self.level, target)
        return SoftLabelMap(probs, self.foreground.copy(), _ambiguity(probs, self.foreground),
                            target, self.annotator_count)


@dataclass
class MajorityLabelMap:
    labels: np.ndarray  # int, -1 where invalid
    valid: np.ndarray


@dataclass
class StapleResult:
    posterior: np.ndarray
    consensus: np.ndarray
    sensitivity: np.ndarray  # (raters, classes)
    specificity: np.ndarray
    iterations: int
    converged: bool
    ties: int = 0


# ------------------------------------------------------------- soft labels

def _strict_argmax(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    top = probs.max(axis=-1, keepdims=True)
    n_top = (probs >= top - VOTE_TOL).sum(axis=-1)
    return probs.argmax(axis=-1), n_top == 1


def _ambiguity(probs: np.ndarray, foreground: np.ndarray) -> np.ndarray:
    _, unique = _strict_argmax(probs)
    return foreground & ~unique


def build_soft_labels(masks: Sequence[AnnotatorMask], foreground: np.ndarray, level: str,
                      ontology: Ontology) -> SoftLabelMap:
    """Average annotator votes per pixel; unannotated pixels vote benign (class 0)."""
    if len(masks) == 0:
        raise ValueError("need at least one annotator mask")
    foreground = np.asarray(foreground, dtype=bool)
    shape = masks[0].weights.shape[:2]
    if foreground.shape != shape or any(m.weights.shape[:2] != shape for m in masks):
        raise ValueError("annotator masks and foreground must share one image size")
    if any(level_index(m.level) < level_index(level) for m in masks):
        raise ValueError(f"masks are coarser than requested level {level!r}")
    n_classes = ontology.level_sizes[level]
    total = np.zeros(shape + (n_classes,))
    for m in masks:
        w = m.remap(ontology, level).weights
        total += w
        total[..., 0] += 1.0 - w.sum(axis=-1)
    probs = total / len(masks)
    probs[~foreground] = 0.0
    return SoftLabelMap(probs, foreground, _ambiguity(probs, foreground), level, len(masks))


def majority_vote(soft: SoftLabelMap) -> MajorityLabelMap:
    """Strict-plurality label per foreground pixel; ties are invalid."""
    arg, unique = _strict_argmax(soft.probs)
    valid = soft.foreground & unique
    return MajorityLabelMap(np.where(valid, arg, -1), valid)


def one_hot_soft_labels(labels: np.ndarray, n_classes: int, foreground: np.ndarray | None = None,
                        level: str = "explanation") -> SoftLabelMap:
    """Wrap a hard label map as a (degenerate) soft label map."""
    labels = np.asarray(labels)
    fg = np.ones(labels.shape, bool) if foreground is None else np.asarray(foreground, bool)
    fg = fg & (labels >= 0)
    probs = np.zeros(labels.shape + (n_classes,))
    probs[fg, labels[fg]] = 1.0
    return SoftLabelMap(probs, fg, np.zeros_like(fg), level, 1)


# ------------------------------------------------------------------ STAPLE

_CLAMP = 1e-6


def _check_raters(d: np.ndarray) -> None:
    for j, row in enumerate(d):
        if row.all() or not row.any():
            warnings.warn(f"rater {j} is all-{'positive' if row.all() else 'negative'}; "
                          "parameters are clamped", StapleWarning, stacklevel=3)


def _staple_posterior(d: np.ndarray, prior: float, sens: np.ndarray, spec: np.ndarray) -> np.ndarray:
    # log-domain E-step: d is (K, P) boolean
    lp, lq = np.log(sens), np.log(spec)
    l1p, l1q = np.log1p(-sens), np.log1p(-spec)
    log_a = np.log(prior) + np.where(d, lp[:, None], l1p[:, None]).sum(axis=0)
    log_b = np.log1p(-prior) + np.where(d, l1q[:, None], lq[:, None]).sum(axis=0)
    return expit(log_a - log_b)


def _staple_binary(d: np.ndarray, init_sens, init_spec, tol: float, max_iter: int):
    k, _ = d.shape
    prior = float(d.mean())
    sens = np.clip(np.broadcast_to(np.asarray(init_sens, float), (k,)).copy(), _CLAMP, 1 - _CLAMP)
    spec = np.clip(np.broadcast_to(np.asarray(init_spec, float), (k,)).copy(), _CLAMP, 1 - _CLAMP)
    if prior in (0.0, 1.0):
        # every rater says the same everywhere: the truth is not in question
        return np.full(d.shape[1], prior), sens, spec, 0, True
    df = d.astype(np.float64)
    converged, it = False, 0
    for it in range(1, max_iter + 1):
        w = _staple_posterior(d, prior, sens, spec)
        sw, snw = w.sum(), (1.0 - w).sum()
        new_sens = (df @ w) / sw if sw > 0 else sens
        new_spec = ((1.0 - df) @ (1.0 - w)) / snw if snw > 0 else spec
        new_sens = np.clip(new_sens, _CLAMP, 1 - _CLAMP)
        new_spec = np.clip(new_spec, _CLAMP, 1 - _CLAMP)
        change = max(np.abs(new_sens - sens).max(), np.abs(new_spec - spec).max())
        sens, spec = new_sens, new_spec
        if change < tol:
            converged = True
            break
    return _staple_posterior(d, prior, sens, spec), sens, spec, it, converged


def staple(binary_masks, init_sens=0.99999, init_spec=0.99999, tol: float = 1e-6,
           max_iter: int = 100) -> StapleResult:
    """Binary STAPLE (simultaneous truth and performance level estimation).

    The foreground prior is fixed at the mean rater foreground fraction.
    Returns a two-class result: ``posterior[..., 1]`` is P(true foreground),
    ``sensitivity[:, 1]``/``specificity[:, 1]`` are the usual per-rater
    estimates (class 0 columns hold the swapped roles).
    """
    masks = np.asarray(binary_masks).astype(bool)
    if masks.ndim < 2 or masks.shape[0] < 2:
        raise ValueError("STAPLE needs at least two rater masks")
    shape = masks.shape[1:]
    d = masks.reshape(masks.shape[0], -1)
    _check_raters(d)
    w, sens, spec, it, conv = _staple_binary(d, init_sens, init_spec, tol, max_iter)
    w = w.reshape(shape)
    posterior = np.stack([1.0 - w, w], axis=-1)
    return StapleResult(
        posterior=posterior,
        consensus=(w > 0.5).astype(np.intp),
        sensitivity=np.stack([spec, sens], axis=1),
        specificity=np.stack([sens, spec], axis=1),
        iterations=it,
        converged=conv,
    )


def staple_multiclass(masks, classes: int, tol: float = 1e-6, max_iter: int = 100,
                      init_sens=0.99999, init_spec=0.99999) -> StapleResult:
    """One-vs-rest STAPLE per class; consensus is the renormalized argmax.

    Ties in the argmax resolve to the lower class id and are counted in
    ``StapleResult.ties``.
    """
    masks = np.asarray(masks)
    if masks.ndim < 2 or masks.shape[0] < 2:
        raise ValueError("STAPLE needs at least two rater masks")
    k = masks.shape[0]
    shape = masks.shape[1:]
    flat = masks.reshape(k, -1)
    post = np.zeros((flat.shape[1], classes))
    sens = np.zeros((k, classes))
    spec = np.zeros((k, classes))
    iters, conv = 0, True
    with warnings.catch_warnings():
        # one-vs-rest makes all-negative raters routine for rare classes
        warnings.simplefilter("ignore", StapleWarning)
        for c in range(classes):
            w, s, q, it, ok = _staple_binary(flat == c, init_sens, init_spec, tol, max_iter)
            post[:, c], sens[:, c], spec[:, c] = w, s, q
            iters, conv = max(iters, it), conv and ok
    total = post.sum(axis=1, keepdims=True)
    post = np.where(total > 0, post / np.where(total > 0, total, 1.0), 1.0 / classes)
    top = post.max(axis=1, keepdims=True)
    ties = int(((post == top).sum(axis=1) > 1).sum())
    if ties:
        warnings.warn(f"{ties} pixel(s) with tied STAPLE posteriors resolved to the lower class",
                      StapleWarning, stacklevel=2)
    return StapleResult(post.reshape(shape + (classes,)), post.argmax(axis=1).reshape(shape),
                        sens, spec, iters, conv, ties)


# ------------------------------------------------------------- .slt files

_SLT_MAGIC = b"SLT1"


def write_slt(path: str | Path, soft: SoftLabelMap) -> None:
    """Write ``magic, u32 H W C, u8 level, f32 probs, u8 foreground, u8 ambiguous``."""
    h, w, c = soft.probs.shape
    with open(path, "wb") as f:
        f.write(_SLT_MAGIC)
        f.write(struct.pack("<IIIB", h, w, c, level_index(soft.level)))
        f.write(np.ascontiguousarray(soft.probs, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(soft.foreground, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(soft.ambiguous, dtype=np.uint8).tobytes())


def read_slt(path: str | Path, annotator_count: int = 1) -> SoftLabelMap:
    data = Path(path).read_bytes()
    if data[:4] != _SLT_MAGIC:
        raise ValueError(f"{path}: not an SLT1 file")
    h, w, c, lvl = struct.unpack_from("<IIIB", data, 4)
    off = 4 + struct.calcsize("<IIIB")
    n = h * w * c
    expected = off + 4 * n + 2 * h * w
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    probs = np.frombuffer(data, "<f4", n, off).reshape(h, w, c).astype(np.float64)
    off += 4 * n
    fg = np.frombuffer(data, np.uint8, h * w, off).reshape(h, w).astype(bool)
    amb = np.frombuffer(data, np.uint8, h * w, off + h * w).reshape(h, w).astype(bool)
    return SoftLabelMap(probs, fg, amb, LEVELS[lvl], annotator_count)
