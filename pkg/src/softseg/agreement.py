"""Inter-rater agreement: Fleiss' kappa, bootstrap intervals, presence tables.

Undefined kappa (expected agreement equal to 1, e.g. every rater always
says "no") is returned as ``None`` rather than NaN.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .annotations import ImageRecord, used_labels
from .fusion import SoftLabelMap, majority_vote
from .ontology import Ontology


@dataclass
class PresenceTable:
    """Boolean ``(images, raters, labels)``: label used at least once by that rater."""

    present: np.ndarray
    image_ids: list[str]
    labels: list[int]
    label_names: list[str]
    groups: list[str]
    level: str

    @property
    def n_raters(self) -> int:
        return self.present.shape[1]

    def label_index(self, label: int | str) -> int:
        if isinstance(label, str):
            if label not in self.label_names:
                raise KeyError(f"label {label!r} not in presence table")
            return self.label_names.index(label)
        if label not in self.labels:
            raise KeyError(f"label id {label} not in presence table")
        return self.labels.index(label)

    def subset(self, group: str | None) -> "PresenceTable":
        if group is None:
            return self
        keep = [i for i, g in enumerate(self.groups) if g == group]
        if not keep:
            raise KeyError(f"no images in group {group!r}")
        return PresenceTable(self.present[keep], [self.image_ids[i] for i in keep], self.labels,
                             self.label_names, [group] * len(keep), self.level)


@dataclass
class KappaReport:
    label: str
    group: str
    kappa: float | None
    ci_low: float | None
    ci_high: float | None
    resamples_used: int
    landis_koch: str


def landis_koch(kappa: float | None) -> str:
    if kappa is None:
        return "undefined"
    if kappa < 0:
        return "poor"
    for bound, name in ((0.20, "slight"), (0.40, "fair"), (0.60, "moderate"), (0.80, "substantial")):
        if kappa <= bound:
            return name
    return "almost perfect"


# ------------------------------------------------------------------- kappa

def fleiss_kappa(counts) -> float | None:
    """Fleiss' kappa of an ``items x categories`` table of rater counts."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] < 1:
        raise ValueError("expected a non-empty items x categories count table")
    if (counts < 0).any():
        raise ValueError("counts must be non-negative")
    n_per_item = counts.sum(axis=1)
    n = n_per_item[0]
    if not np.all(n_per_item == n):
        raise ValueError("every item must be rated by the same number of raters")
    if n < 2:
        raise ValueError("need at least two raters per item")
    n_items = counts.shape[0]
    if np.all(counts == np.rint(counts)):
        # integer tables: one exact rational, rounded once
        c = counts.astype(np.int64)
        ni, nn = int(n_items), int(n)
        a = int((c ** 2).sum()) - ni * nn
        b = int((c.sum(axis=0) ** 2).sum())
        d1 = ni * nn * (nn - 1)
        d2 = (ni * nn) ** 2
        if b >= d2:
            return None
        return (a * d2 - b * d1) / (d1 * (d2 - b))
    p_item = ((counts ** 2).sum(axis=1) - n) / (n * (n - 1))
    p_bar = p_item.mean()
    p_cat = counts.sum(axis=0) / (n_items * n)
    p_e = (p_cat ** 2).sum()
    if p_e >= 1.0:
        return None
    return float((p_bar - p_e) / (1.0 - p_e))


def _binary_kappa_batch(yes: np.ndarray, n: int) -> np.ndarray:
    """Binary Fleiss' kappa along the last axis of yes-counts; NaN where undefined."""
    no = n - yes
    p_bar = ((yes ** 2 + no ** 2 - n) / (n * (n - 1))).mean(axis=-1)
    p_yes = yes.mean(axis=-1) / n
    p_e = p_yes ** 2 + (1 - p_yes) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        k = (p_bar - p_e) / (1 - p_e)
    return np.where(p_e >= 1.0, np.nan, k)


def _items(presence: PresenceTable, labels: Sequence[int | str] | None) -> np.ndarray:
    """Yes-counts per (image, label) item, shape ``(images, n_labels)``."""
    idx = range(len(presence.labels)) if labels is None else [presence.label_index(l) for l in labels]
    return presence.present[:, :, list(idx)].sum(axis=1).astype(np.float64)


def kappa_presence(presence: PresenceTable, labels: Sequence[int | str] | None = None) -> float | None:
    """Binary kappa pooled over all (image, label) decisions for ``labels``."""
    yes = _items(presence, labels).ravel()
    n = presence.n_raters
    return fleiss_kappa(np.stack([yes, n - yes], axis=1))


def kappa_per_label(presence: PresenceTable, label: int | str, group: str | None = None) -> float | None:
    return kappa_presence(presence.subset(group), [label])


def kappa_label_mean(presence: PresenceTable, group: str | None = None) -> float | None:
    """Mean of the defined per-label kappas (the non-pooled alternative)."""
    sub = presence.subset(group)
    vals = [kappa_presence(sub, [l]) for l in sub.labels]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def bootstrap_ci(presence: PresenceTable, labels: Sequence[int | str] | int | str | None,
                 resamples: int = 10_000, seed: int = 0, group: str | None = None,
                 threads: int = 1, level: float = 0.95) -> tuple[float, float, int]:
    """Percentile bootstrap interval of the pooled kappa, resampling images.

    Resample ``i`` draws from ``default_rng([seed, i])`` so the result does
    not depend on ``threads``.  Returns ``(low, high, resamples_used)``;
    resamples with undefined kappa are excluded.
    """
    if isinstance(labels, (int, str)):
        labels = [labels]
    sub = presence.subset(group)
    yes = _items(sub, labels)
    n_img = yes.shape[0]
    if n_img < 2:
        raise ValueError("bootstrap needs at least two images")
    n = sub.n_raters

    def chunk(lo: int, hi: int) -> np.ndarray:
        out = np.empty(hi - lo)
        for r in range(lo, hi):
            idx = np.random.default_rng([seed, r]).integers(0, n_img, n_img)
            out[r - lo] = _binary_kappa_batch(yes[idx].ravel(), n)
        return out

    bounds = np.linspace(0, resamples, max(1, threads) + 1).astype(int)
    spans = list(zip(bounds[:-1], bounds[1:]))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda s: chunk(*s), spans))
    else:
        parts = [chunk(*s) for s in spans]
    kappas = np.concatenate(parts)
    kappas = kappas[~np.isnan(kappas)]
    if kappas.size == 0:
        raise ValueError("every bootstrap resample had undefined kappa")
    alpha = (1 - level) / 2
    lo, hi = np.percentile(kappas, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi), int(kappas.size)


def kappa_report(presence: PresenceTable, labels: Sequence[int | str] | None, name: str,
                 group: str | None = None, resamples: int = 10_000, seed: int = 0,
                 threads: int = 1) -> KappaReport:
    sub = presence.subset(group)
    k = kappa_presence(sub, labels)
    try:
        lo, hi, used = bootstrap_ci(sub, labels, resamples, seed, threads=threads)
    except ValueError:
        lo = hi = None
        used = 0
    return KappaReport(name, group or "all", k, lo, hi, used, landis_koch(k))


def kappa_table(presence: PresenceTable, resamples: int = 10_000, seed: int = 0,
                threads: int = 1, by_group: bool = False) -> list[KappaReport]:
    """Per-label kappas plus the pooled all-label kappa, globally or per group."""
    groups = sorted(set(presence.groups)) if by_group else [None]
    reports = []
    for g in groups:
        for lab, name in zip(presence.labels, presence.label_names):
            reports.append(kappa_report(presence, [lab], name, g, resamples, seed, threads))
        reports.append(kappa_report(presence, None, "all labels", g, resamples, seed, threads))
    return reports


def write_kappa_reports(reports: Sequence[KappaReport], json_path: Path, csv_path: Path) -> None:
    rows = [asdict(r) for r in reports]
    Path(json_path).write_text(json.dumps(rows, indent=1) + "\n")
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else list(KappaReport.__annotations__))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("NA" if v is None else v) for k, v in r.items()})


# ---------------------------------------------------------------- presence

def build_presence(records: Sequence[ImageRecord], ontology: Ontology, level: str = "explanation",
                   groups: Mapping[str, str] | None = None) -> PresenceTable:
    """Binarize label usage per image and rater; benign is excluded from the label axis."""
    if not records:
        raise ValueError("no images")
    n = len(records[0].annotation_sets)
    labels = list(range(1, ontology.level_sizes[level]))
    present = np.zeros((len(records), n, len(labels)), dtype=bool)
    for i, rec in enumerate(records):
        if len(rec.annotation_sets) != n:
            raise ValueError(f"{rec.image_id}: {len(rec.annotation_sets)} raters, expected {n}")
        sets = sorted(rec.annotation_sets, key=lambda s: s.annotator_id)
        for j, aset in enumerate(sets):
            for c in used_labels(aset, ontology, level):
                if c > 0:
                    present[i, j, c - 1] = True
    grp = [str((groups or {}).get(r.image_id, r.extra.get("group", "all"))) for r in records]
    names = ontology.short_names(level)[1:]
    return PresenceTable(present, [r.image_id for r in records], labels, names, grp, level)


def presence_heatmap(presence: PresenceTable) -> np.ndarray:
    """``(labels, n + 1)`` counts of images where exactly k of n raters used the label."""
    yes = presence.present.sum(axis=1)
    n = presence.n_raters
    return np.stack([np.bincount(yes[:, j], minlength=n + 1) for j in range(yes.shape[1])])


def share_at_least(heatmap: np.ndarray, k: int = 2) -> np.ndarray:
    """Among images where a label was used at all, the share with >= k raters."""
    used = heatmap[:, 1:].sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(used > 0, heatmap[:, k:].sum(axis=1) / used, np.nan)


# ------------------------------------------------------------ pixel level

@dataclass
class PixelAgreement:
    counts: np.ndarray  # (classes, K): pixels where exactly k+1 raters chose the class
    shares: np.ndarray  # counts normalized per class
    unique_majority_share: float
    foreground_pixels: int


def pixel_agreement_stats(maps: Sequence[SoftLabelMap], tol: float = 1e-9) -> PixelAgreement:
    """Distribute annotated pixels by the number of agreeing annotators."""
    if not maps:
        raise ValueError("no soft label maps")
    k = maps[0].annotator_count
    c = maps[0].n_classes
    counts = np.zeros((c, k), dtype=np.int64)
    unique = fg_total = 0
    for m in maps:
        if m.annotator_count != k or m.n_classes != c:
            raise ValueError("soft maps disagree on annotator count or class count")
        votes = m.probs[m.foreground] * k
        rounded = np.rint(votes)
        if np.abs(votes - rounded).max(initial=0.0) > tol * k:
            raise ValueError("soft labels are not whole-vote quantized; pixel agreement needs single-label votes")
        rounded = rounded.astype(np.int64)
        for kk in range(1, k + 1):
            counts[:, kk - 1] += (rounded == kk).sum(axis=0)
        unique += int(majority_vote(m).valid.sum())
        fg_total += int(m.foreground.sum())
    totals = counts.sum(axis=1, keepdims=True)
    shares = np.divide(counts, totals, out=np.zeros(counts.shape), where=totals > 0)
    return PixelAgreement(counts, shares, unique / fg_total if fg_total else float("nan"), fg_total)


# ---------------------------------------------------------- grade vs labels

@dataclass
class GradeConfusion:
    """Rows: given pattern; columns: annotated pattern (GP3, GP4, GP5 order)."""

    matrix: np.ndarray
    missed: np.ndarray  # given patterns no annotator used
    skipped: list[str]


def grade_annotation_confusion(given_grades: Mapping[str, Sequence[int]], records: Sequence[ImageRecord],
                               ontology: Ontology) -> GradeConfusion:
    """Compare given Gleason scores with the patterns annotators used.

    Each pattern counts once per image.  An annotated pattern that is part
    of the given score lands on the diagonal; otherwise it is attributed to
    the nearest given pattern (higher one on ties).
    """
    grades = [3, 4, 5]
    ids = [ontology.pattern_id_for_grade(g) for g in grades]
    matrix = np.zeros((3, 3), dtype=np.int64)
    missed = np.zeros(3, dtype=np.int64)
    skipped = []
    for rec in records:
        given = given_grades.get(rec.image_id)
        if given is None:
            skipped.append(rec.image_id)
            continue
        given = sorted({int(g) for g in given})
        used = set()
        for aset in rec.annotation_sets:
            used |= used_labels(aset, ontology, "pattern")
        annotated = sorted(grades[ids.index(c)] for c in used if c in ids)
        for a in annotated:
            row = a if a in given else min(given, key=lambda g: (abs(g - a), -g))
            matrix[row - 3, a - 3] += 1
        for g in given:
            if g not in annotated:
                missed[g - 3] += 1
    return GradeConfusion(matrix, missed, skipped)
