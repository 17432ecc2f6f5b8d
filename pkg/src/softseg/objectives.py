"""Masked segmentation losses with analytic gradients w.r.t. logits.

Arrays use the network layout: logits and soft targets are ``N x C x P``
(``P`` flattened pixels), hard targets are ``N x P`` class indices and the
count mask is ``N x P``.  Every loss is first written as a function of the
class probabilities, returning ``(value, dL/dp)``, and then pulled back
through the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ontology import LEVELS, Ontology, level_index

DICE_EPS = 1e-6
LOG_EPS = 1e-12

LOSS_IDS = ("softdice", "tree:softdice", "tree:ce", "ce-soft", "ce-hard", "dice-hard")


@dataclass
class LossValueGrad:
    value: float
    grad_logits: np.ndarray


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray, axis: int = 1) -> np.ndarray:
    return p * (grad_p - (p * grad_p).sum(axis=axis, keepdims=True))


def _check(p: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if p.ndim != 3:
        raise ValueError("expected N x C x P arrays")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (p.shape[0], p.shape[2]):
        raise ValueError(f"mask shape {mask.shape} does not match N x P = {(p.shape[0], p.shape[2])}")
    if not mask.any():
        raise ValueError("empty count mask: no pixels to compute the loss on")
    return mask


# ------------------------------------------------------- probability space

def soft_dice_p(p: np.ndarray, y: np.ndarray, mask: np.ndarray, eps: float = DICE_EPS):
    """``1 - mean_c (2 sum p*y + eps) / (sum (p + y) + eps)``, sums pooled over the batch."""
    m = _check(p, mask)[:, None, :].astype(p.dtype)
    inter = (p * y * m).sum(axis=(0, 2))
    denom = ((p + y) * m).sum(axis=(0, 2)) + eps
    dice = (2.0 * inter + eps) / denom
    n_classes = p.shape[1]
    value = 1.0 - dice.mean()
    grad = -(2.0 * y - dice[None, :, None]) / denom[None, :, None] / n_classes * m
    return float(value), grad


def cross_entropy_p(p: np.ndarray, y: np.ndarray, mask: np.ndarray):
    """``-(1/|mask|) sum_masked sum_c y_c log(p_c + 1e-12)``."""
    m = _check(p, mask)
    count = m.sum()
    mf = m[:, None, :].astype(p.dtype)
    value = -(y * np.log(p + LOG_EPS) * mf).sum() / count
    grad = -(y / (p + LOG_EPS)) * mf / count
    return float(value), grad


_P_LOSSES: dict[str, Callable] = {"softdice": soft_dice_p, "ce": cross_entropy_p}


def _remap_classes(p: np.ndarray, anc: np.ndarray, n_parent: int) -> np.ndarray:
    out = np.zeros((p.shape[0], n_parent, p.shape[2]), dtype=p.dtype)
    for child, parent in enumerate(anc):
        out[:, parent] += p[:, child]
    return out


def tree_loss_p(base: str, p: np.ndarray, y: np.ndarray, mask: np.ndarray, ontology: Ontology,
                level: str, lam: float = 0.5):
    """``lam * L(p, y) + (1 - lam) * TreeLoss(p_map, y_map)`` recursively up to patterns.

    At the pattern level the tree loss is the base loss itself, so the
    explanation level gets two terms and the sub-explanation level three.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    base_fn = _P_LOSSES[base]
    if level_index(level) == 0:
        return base_fn(p, y, mask)
    parent_level = LEVELS[level_index(level) - 1]
    phi = ontology.parent_map(level)
    n_parent = ontology.level_sizes[parent_level]
    if lam == 1.0:
        return base_fn(p, y, mask)
    v_up, g_up = tree_loss_p(base, _remap_classes(p, phi, n_parent), _remap_classes(y, phi, n_parent),
                             mask, ontology, parent_level, lam)
    g_down = g_up[:, phi, :]
    if lam == 0.0:
        return v_up, g_down
    v_here, g_here = base_fn(p, y, mask)
    return lam * v_here + (1.0 - lam) * v_up, lam * g_here + (1.0 - lam) * g_down


# ------------------------------------------------------------ logit space

def _pull_back(p: np.ndarray, value: float, grad_p: np.ndarray) -> LossValueGrad:
    return LossValueGrad(value, softmax_backward(p, grad_p))


def one_hot_targets(labels: np.ndarray, n_classes: int, dtype=np.float64) -> np.ndarray:
    """``N x P`` indices (negative = invalid) -> ``N x C x P`` one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes, labels.shape[1]), dtype=dtype)
    n_idx, p_idx = np.nonzero(labels >= 0)
    out[n_idx, labels[n_idx, p_idx], p_idx] = 1.0
    return out


def soft_dice_loss(logits: np.ndarray, y: np.ndarray, mask: np.ndarray, eps: float = DICE_EPS) -> LossValueGrad:
    p = softmax(logits)
    return _pull_back(p, *soft_dice_p(p, y, mask, eps))


def cross_entropy_soft(logits: np.ndarray, y: np.ndarray, mask: np.ndarray) -> LossValueGrad:
    p = softmax(logits)
    return _pull_back(p, *cross_entropy_p(p, y, mask))


def cross_entropy_hard(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> LossValueGrad:
    """Cross-entropy against class indices over ``mask & (labels >= 0)``."""
    mask = np.asarray(mask, bool) & (np.asarray(labels) >= 0)
    y = one_hot_targets(labels, logits.shape[1], logits.dtype)
    return cross_entropy_soft(logits, y, mask)


def dice_loss_hard(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray, eps: float = DICE_EPS) -> LossValueGrad:
    mask = np.asarray(mask, bool) & (np.asarray(labels) >= 0)
    y = one_hot_targets(labels, logits.shape[1], logits.dtype)
    return soft_dice_loss(logits, y, mask, eps)


def tree_loss(base: str, logits: np.ndarray, y: np.ndarray, mask: np.ndarray, ontology: Ontology,
              level: str, lam: float = 0.5) -> LossValueGrad:
    p = softmax(logits)
    return _pull_back(p, *tree_loss_p(base, p, y, mask, ontology, level, lam))


@dataclass
class Targets:
    """Both target flavours for one batch; losses pick what they need."""

    soft: np.ndarray  # N x C x P
    hard: np.ndarray  # N x P, -1 where ambiguous or background
    foreground: np.ndarray  # N x P


def is_hard_loss(loss_id: str) -> bool:
    return loss_id in ("ce-hard", "dice-hard")


def compute_loss(loss_id: str, logits: np.ndarray, targets: Targets, ontology: Ontology | None = None,
                 level: str | None = None, lam: float = 0.5) -> LossValueGrad:
    """Dispatch on a loss identifier (see :data:`LOSS_IDS`)."""
    fg = targets.foreground
    if loss_id == "softdice":
        return soft_dice_loss(logits, targets.soft, fg)
    if loss_id == "ce-soft":
        return cross_entropy_soft(logits, targets.soft, fg)
    if loss_id == "ce-hard":
        return cross_entropy_hard(logits, targets.hard, fg)
    if loss_id == "dice-hard":
        return dice_loss_hard(logits, targets.hard, fg)
    if loss_id.startswith("tree:"):
        base = {"tree:softdice": "softdice", "tree:ce": "ce"}.get(loss_id)
        if base is None:
            raise ValueError(f"unknown tree loss {loss_id!r}")
        if ontology is None or level is None:
            raise ValueError("tree losses need an ontology and a level")
        return tree_loss(base, logits, targets.soft, fg, ontology, level, lam)
    raise ValueError(f"unknown loss id {loss_id!r}; expected one of {LOSS_IDS}")
