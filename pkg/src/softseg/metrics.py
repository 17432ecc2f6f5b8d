"""Evaluation metrics under foreground / unambiguous-majority masking.

Maps are class-last (``... x C``).  Soft metrics (Macro SoftDice, L1) are
computed over foreground pixels; hard metrics (Dice, Macro Dice, confusion)
over foreground pixels with a unique majority vote.  Reductions pool all
pixels of all images before dividing.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fusion import MajorityLabelMap, SoftLabelMap, majority_vote
from .ontology import Ontology, level_index, remap_up

SOFTDICE_EPS = 1e-6


def _masked(p, y, mask):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if p.shape != y.shape or mask.shape != p.shape[:-1]:
        raise ValueError("p, y must share a shape and mask must match their pixel axes")
    if not mask.any():
        raise ValueError("empty mask")
    return p[mask], y[mask]


def macro_softdice(p, y, mask, eps: float = SOFTDICE_EPS) -> float:
    """Class-averaged L1 Dice similarity between two distribution maps."""
    pm, ym = _masked(p, y, mask)
    sp, sy = pm.sum(axis=0), ym.sum(axis=0)
    diff = np.abs(pm - ym).sum(axis=0)
    return float(((sp + sy - diff + eps) / (sp + sy + eps)).mean())


def l1_metric(p, y, mask, normalization: str = "per-pixel") -> float:
    """Total-variation style L1 distance in ``[0, 1]``.

    ``"per-pixel"`` divides by ``2 |mask|``; ``"per-pixel-per-class"``
    additionally divides by the class count.
    """
    pm, ym = _masked(p, y, mask)
    total = np.abs(pm - ym).sum()
    if normalization == "per-pixel":
        return float(total / (2.0 * pm.shape[0]))
    if normalization == "per-pixel-per-class":
        return float(total / (2.0 * pm.shape[0] * pm.shape[1]))
    raise ValueError(f"unknown normalization {normalization!r}")


def _hard_pairs(pred_labels, majority: MajorityLabelMap, mask=None):
    pred = np.asarray(pred_labels)
    valid = majority.valid if mask is None else majority.valid & np.asarray(mask, bool)
    if not valid.any():
        raise ValueError("no valid (unambiguous foreground) pixels")
    return pred[valid].astype(np.int64), majority.labels[valid].astype(np.int64)


def dice_micro(pred_labels, majority: MajorityLabelMap, mask=None) -> float:
    """Globally pooled Dice; equals pixel accuracy for exclusive labels."""
    pred, gt = _hard_pairs(pred_labels, majority, mask)
    n_classes = int(max(pred.max(), gt.max())) + 1
    tp = np.bincount(gt[pred == gt], minlength=n_classes)
    size_pred = np.bincount(pred, minlength=n_classes)
    size_gt = np.bincount(gt, minlength=n_classes)
    return float(2 * int(tp.sum())) / float(int(size_pred.sum() + size_gt.sum()))


def dice_macro(pred_labels, majority: MajorityLabelMap, n_classes: int, mask=None,
               include_absent: bool = False) -> float:
    """Mean per-class Dice; classes absent from prediction and target are skipped.

    With ``include_absent`` such classes score 1 (the smoothed 0/0 limit).
    """
    pred, gt = _hard_pairs(pred_labels, majority, mask)
    tp = np.bincount(gt[pred == gt], minlength=n_classes).astype(np.float64)
    denom = (np.bincount(pred, minlength=n_classes) + np.bincount(gt, minlength=n_classes)).astype(np.float64)
    present = denom > 0
    scores = np.where(present, 2 * tp / np.where(present, denom, 1.0), 1.0)
    return float(scores.mean() if include_absent else scores[present].mean())


def confusion_matrix(pred_labels, majority: MajorityLabelMap, n_classes: int, mask=None,
                     normalize: str | None = "rows") -> np.ndarray:
    """Rows: majority label; columns: predicted label.  ``"rows"`` gives percentages."""
    pred, gt = _hard_pairs(pred_labels, majority, mask)
    cm = np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes)
    cm = cm.reshape(n_classes, n_classes).astype(np.float64)
    if normalize is None:
        return cm
    if normalize != "rows":
        raise ValueError(f"unknown normalization {normalize!r}")
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(100.0 * cm, rows, out=np.zeros_like(cm), where=rows > 0)


@dataclass
class ClassMass:
    predicted_mass: np.ndarray
    target_mass: np.ndarray
    argmax_share: np.ndarray
    majority_share: np.ndarray


def class_mass_summary(p, y, mask, majority: MajorityLabelMap | None = None) -> ClassMass:
    """Per-class shares of probability mass and of argmax / majority pixels."""
    pm, ym = _masked(p, y, mask)
    c = pm.shape[1]
    pred_mass = pm.sum(axis=0) / pm.sum()
    tgt_mass = ym.sum(axis=0) / ym.sum()
    arg = np.bincount(pm.argmax(axis=1), minlength=c) / pm.shape[0]
    if majority is None:
        maj_labels = ym.argmax(axis=1)
    else:
        valid = majority.valid & np.asarray(mask, bool)
        maj_labels = majority.labels[valid]
    maj = np.bincount(maj_labels, minlength=c) / max(1, maj_labels.size)
    return ClassMass(pred_mass, tgt_mass, arg, maj)


# ------------------------------------------------------------- evaluation

@dataclass
class MetricsReport:
    level_evaluated: str
    level_trained: str
    macro_softdice: float
    l1: float
    l1_per_class_normalized: float
    dice: float
    macro_dice: float
    confusion: np.ndarray
    class_mass: ClassMass
    class_names: list[str] = field(default_factory=list)
    pixels_soft: int = 0
    pixels_hard: int = 0


def evaluate(preds: Sequence[np.ndarray] | np.ndarray, softs: Sequence[SoftLabelMap] | SoftLabelMap,
             ontology: Ontology, eval_level: str, trained_level: str | None = None) -> MetricsReport:
    """Compute every metric at ``eval_level``, remapping predictions and labels as needed.

    ``preds`` are ``H x W x C`` probability maps at the trained level (the
    level of the soft labels unless ``trained_level`` says otherwise).
    Several images are pooled into one report.
    """
    if isinstance(softs, SoftLabelMap):
        softs, preds = [softs], [preds]
    if len(preds) != len(softs):
        raise ValueError("need one prediction per soft label map")
    trained_level = trained_level or softs[0].level
    if level_index(eval_level) > level_index(trained_level):
        raise ValueError(f"cannot evaluate at {eval_level!r}, below trained level {trained_level!r}")
    ps, ys, fgs, majs = [], [], [], []
    for pred, soft in zip(preds, softs):
        pred = np.asarray(pred, dtype=np.float64)
        if level_index(soft.level) < level_index(eval_level):
            raise ValueError(f"soft labels at {soft.level!r} are coarser than {eval_level!r}")
        if pred.shape[-1] != ontology.level_sizes[trained_level]:
            raise ValueError(f"prediction has {pred.shape[-1]} classes, level {trained_level!r} has "
                             f"{ontology.level_sizes[trained_level]}")
        if eval_level != trained_level:
            pred = remap_up(pred, ontology, trained_level, eval_level)
        soft = soft.remap(ontology, eval_level)
        ps.append(pred.reshape(-1, pred.shape[-1]))
        ys.append(soft.probs.reshape(-1, soft.n_classes))
        fgs.append(soft.foreground.ravel())
        maj = majority_vote(soft)
        majs.append((maj.labels.ravel(), maj.valid.ravel()))
    p = np.concatenate(ps)
    y = np.concatenate(ys)
    fg = np.concatenate(fgs)
    majority = MajorityLabelMap(np.concatenate([m[0] for m in majs]), np.concatenate([m[1] for m in majs]))
    argmax = p.argmax(axis=1)
    c = ontology.level_sizes[eval_level]
    return MetricsReport(
        level_evaluated=eval_level,
        level_trained=trained_level,
        macro_softdice=macro_softdice(p, y, fg),
        l1=l1_metric(p, y, fg),
        l1_per_class_normalized=l1_metric(p, y, fg, "per-pixel-per-class"),
        dice=dice_micro(argmax, majority, fg),
        macro_dice=dice_macro(argmax, majority, c, fg),
        confusion=confusion_matrix(argmax, majority, c, fg),
        class_mass=class_mass_summary(p, y, fg, majority),
        class_names=ontology.short_names(eval_level),
        pixels_soft=int(fg.sum()),
        pixels_hard=int((majority.valid & fg).sum()),
    )


SCALAR_METRICS = ("macro_softdice", "l1", "l1_per_class_normalized", "dice", "macro_dice")


def summarize(reports: Sequence[MetricsReport]) -> dict:
    """Mean and (population) standard deviation of the scalar metrics over runs."""
    out = {"runs": len(reports),
           "level_evaluated": reports[0].level_evaluated,
           "level_trained": reports[0].level_trained}
    for name in SCALAR_METRICS:
        vals = np.array([getattr(r, name) for r in reports])
        out[name] = {"mean": float(vals.mean()), "std": float(vals.std()) if len(vals) > 1 else 0.0}
    return out


def report_to_dict(report: MetricsReport) -> dict:
    d = {k: getattr(report, k) for k in (
        "level_evaluated", "level_trained", *SCALAR_METRICS, "class_names", "pixels_soft", "pixels_hard")}
    d["confusion"] = report.confusion.tolist()
    d["class_mass"] = {k: v.tolist() for k, v in asdict(report.class_mass).items()}
    return d


def write_report(report: MetricsReport, json_path: Path, confusion_csv: Path | None = None) -> None:
    Path(json_path).write_text(json.dumps(report_to_dict(report), indent=1) + "\n")
    if confusion_csv is not None:
        with open(confusion_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["majority \\ predicted", *report.class_names])
            for name, row in zip(report.class_names, report.confusion):
                w.writerow([name, *(f"{v:.6f}" for v in row)])
