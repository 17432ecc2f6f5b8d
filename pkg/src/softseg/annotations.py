"""Polygon annotation ingestion, cleaning and rasterization.

Each annotator's polygons for one image are cleaned in two passes:

* unlabeled polygons inherit the labels of the next labeled polygon in
  creation order (trailing unlabeled polygons are dropped);
* a polygon carrying ``k`` labels becomes ``k`` group-linked copies which
  are painted together with weight ``1/k`` per class.

Painting order is ``(source_grade, created_seq)`` ascending; later paint
overwrites earlier paint.  Pixel ``(row, col)`` is inside a polygon when its
center ``(col + 0.5, row + 0.5)`` passes the even-odd test.
"""

from __future__ import annotations

import json
import logging
import re
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ontology import Ontology, level_index, remap_up

log = logging.getLogger(__name__)

UNMAPPED = -1


class AnnotationError(ValueError):
    pass


class AnnotationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PolygonRecord:
    vertices: np.ndarray
    class_ids: tuple[int, ...] = ()
    created_seq: int = 0
    source_grade: int = 0
    raw_label: str | None = None
    group: int | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise AnnotationError("a polygon needs at least 3 (x, y) vertices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))


@dataclass
class AnnotationSet:
    image_id: str
    annotator_id: str
    polygons: list[PolygonRecord]
    image_size: tuple[int, int]
    level: str = "sub_explanation"


@dataclass
class AnnotatorMask:
    """Per-pixel class weights, ``H x W x C``; rows sum to 0 (unannotated) or 1."""

    weights: np.ndarray
    level: str

    @property
    def annotated(self) -> np.ndarray:
        return self.weights.sum(axis=-1) > 0.5

    def remap(self, ontology: Ontology, target: str) -> "AnnotatorMask":
        if target == self.level:
            return self
        return AnnotatorMask(remap_up(self.weights, ontology, self.level, target), target)


@dataclass
class CleaningReport:
    dropped: int = 0
    seq_ties: int = 0
    duplicated: int = 0


@dataclass
class ImageRecord:
    image_id: str
    image_path: Path | None
    size: tuple[int, int]
    annotation_sets: list[AnnotationSet]
    spacing: float | None = None
    gleason_score: tuple[int, ...] | None = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------- free text

def _norm_text(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip().casefold()


def load_synonyms(path: str | Path | None = None, ontology: Ontology | None = None,
                  level: str = "sub_explanation") -> dict[str, int]:
    """Read a ``raw<TAB>id`` synonym table; ids may be integers or short names."""
    if path is None:
        text = resources.files("softseg.data").joinpath("synonyms.tsv").read_text()
    else:
        text = Path(path).read_text()
    table = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            raw, target = line.rsplit("\t", 1)
        except ValueError:
            raise AnnotationError(f"synonym table line {lineno}: expected raw<TAB>id") from None
        target = target.strip()
        if target.lstrip("-").isdigit():
            cid = int(target)
        elif ontology is not None:
            cid = ontology.class_id(level, target)
        else:
            raise AnnotationError(f"synonym table line {lineno}: short name {target!r} needs an ontology")
        table[_norm_text(raw)] = cid
    return table


def normalize_free_text(raw: str, ontology: Ontology, synonym_table: Mapping[str, int],
                        level: str = "sub_explanation") -> int:
    """Map a free-text label to a class id at ``level``, or :data:`UNMAPPED`."""
    key = _norm_text(raw)
    for node in ontology.classes(level):
        if key in (_norm_text(node.name), _norm_text(node.short_name)):
            return node.id
    return synonym_table.get(key, UNMAPPED)


# ----------------------------------------------------------------- cleaning

def _creation_order(polygons: Sequence[PolygonRecord], report: CleaningReport | None = None):
    order = sorted(range(len(polygons)), key=lambda i: (polygons[i].created_seq, i))
    seqs = [polygons[i].created_seq for i in order]
    ties = sum(a == b for a, b in zip(seqs, seqs[1:]))
    if ties:
        warnings.warn(f"{ties} created_seq ties broken by polygon index", AnnotationWarning, stacklevel=3)
        if report is not None:
            report.seq_ties += ties
    return order


def fill_forward_labels(polygons: Sequence[PolygonRecord],
                        report: CleaningReport | None = None) -> list[PolygonRecord]:
    """Give unlabeled polygons the labels of the next labeled one (by ``created_seq``).

    Unlabeled polygons with no labeled successor are dropped; their count is
    added to ``report.dropped``.
    """
    report = report if report is not None else CleaningReport()
    order = _creation_order(polygons, report)
    out: list[PolygonRecord] = []
    carry: tuple[int, ...] = ()
    for i in reversed(order):
        poly = polygons[i]
        if poly.class_ids:
            carry = poly.class_ids
            out.append(poly)
        elif carry:
            out.append(replace(poly, class_ids=carry))
        else:
            report.dropped += 1
    out.reverse()
    if report.dropped:
        log.info("dropped %d trailing unlabeled polygon(s)", report.dropped)
    return out


def duplicate_multilabel(polygons: Sequence[PolygonRecord],
                         report: CleaningReport | None = None) -> list[PolygonRecord]:
    """Split each k-label polygon into k single-label, group-linked copies."""
    out = []
    next_group = 1 + max((p.group for p in polygons if p.group is not None), default=-1)
    for poly in polygons:
        labels = tuple(dict.fromkeys(poly.class_ids))
        if not labels:
            raise AnnotationError("unlabeled polygon reached duplication; run fill_forward_labels first")
        if len(labels) == 1:
            out.append(replace(poly, class_ids=labels))
            continue
        gid = next_group if poly.group is None else poly.group
        next_group += poly.group is None
        out.extend(replace(poly, class_ids=(c,), group=gid) for c in labels)
        if report is not None:
            report.duplicated += len(labels) - 1
    return out


def clean_polygons(polygons: Sequence[PolygonRecord]) -> tuple[list[PolygonRecord], CleaningReport]:
    report = CleaningReport()
    return duplicate_multilabel(fill_forward_labels(polygons, report), report), report


# ------------------------------------------------------------ rasterization

def polygon_mask(vertices: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Even-odd fill of a polygon sampled at pixel centers.

    Vertices are ``(x, y)`` = ``(col, row)`` in pixel units.  Coordinates
    outside the image are allowed; only in-image centers are tested, which
    is equivalent to clipping the polygon to the image.
    """
    h, w = shape
    v = np.asarray(vertices, dtype=np.float64)
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    mask = np.zeros((h, w), dtype=bool)
    r_lo = max(0, int(np.floor(y0.min() - 0.5)))
    r_hi = min(h, int(np.ceil(y0.max() + 0.5)))
    centers = np.arange(w) + 0.5
    for r in range(r_lo, r_hi):
        yc = r + 0.5
        sel = (y0 > yc) != (y1 > yc)
        if not sel.any():
            continue
        xa, ya, xb, yb = x0[sel], y0[sel], x1[sel], y1[sel]
        xs = np.sort((xb - xa) * (yc - ya) / (yb - ya) + xa)
        n_right = xs.size - np.searchsorted(xs, centers, side="right")
        mask[r] = (n_right & 1).astype(bool)
    return mask


def _outside(vertices: np.ndarray, shape: tuple[int, int]) -> bool:
    h, w = shape
    x, y = vertices[:, 0], vertices[:, 1]
    return x.max() <= 0 or y.max() <= 0 or x.min() >= w or y.min() >= h


def rasterize(aset: AnnotationSet, ontology: Ontology, level: str | None = None) -> AnnotatorMask:
    """Paint one annotator's cleaned polygons into a weighted label mask."""
    level = level or aset.level
    n_classes = ontology.level_sizes[level]
    h, w = aset.image_size
    weights = np.zeros((h, w, n_classes))
    polys = aset.polygons
    order = sorted(range(len(polys)), key=lambda i: (polys[i].source_grade, polys[i].created_seq, i))

    # consecutive copies sharing a group id are painted as one stroke
    strokes: list[list[PolygonRecord]] = []
    for i in order:
        p = polys[i]
        if strokes and p.group is not None and strokes[-1][0].group == p.group:
            strokes[-1].append(p)
        else:
            strokes.append([p])

    for stroke in strokes:
        labels = [c for p in stroke for c in p.class_ids]
        if not labels:
            raise AnnotationError(f"{aset.image_id}/{aset.annotator_id}: unlabeled polygon at rasterization")
        bad = [c for c in labels if c < 0 or c >= n_classes]
        if bad:
            raise AnnotationError(
                f"{aset.image_id}/{aset.annotator_id}: unmapped or unknown class id {bad[0]} "
                f"(created_seq {stroke[0].created_seq})"
            )
        cover = np.zeros((h, w), dtype=bool)
        for p in stroke:
            if _outside(p.vertices, (h, w)):
                warnings.warn(
                    f"{aset.image_id}/{aset.annotator_id}: polygon {p.created_seq} lies outside the image",
                    AnnotationWarning, stacklevel=2)
                continue
            cover |= polygon_mask(p.vertices, (h, w))
        if not cover.any():
            continue
        weights[cover] = 0.0
        share = 1.0 / len(labels)
        for c in labels:
            weights[cover, c] += share
    return AnnotatorMask(weights, level)


def scale_annotation_set(aset: AnnotationSet, factor: float, image_size: tuple[int, int]) -> AnnotationSet:
    """Rescale polygon coordinates, e.g. after resampling the image."""
    polys = [replace(p, vertices=p.vertices * factor) for p in aset.polygons]
    return replace(aset, polygons=polys, image_size=tuple(image_size))


# ----------------------------------------------------------------- manifest

def _resolve_label(label, ontology: Ontology, synonyms: Mapping[str, int], level: str) -> int:
    if isinstance(label, bool):
        raise AnnotationError(f"invalid label {label!r}")
    if isinstance(label, int):
        return label
    try:
        return ontology.class_id(level, str(label))
    except KeyError:
        return normalize_free_text(str(label), ontology, synonyms, level)


def parse_manifest(doc: dict, ontology: Ontology, synonyms: Mapping[str, int] | None = None,
                   base_dir: Path | None = None) -> ImageRecord:
    """Build an :class:`ImageRecord` from one parsed manifest document."""
    if synonyms is None:
        synonyms = load_synonyms(ontology=ontology)
    level = doc.get("level", "sub_explanation")
    level_index(level)
    try:
        image_id = str(doc["image_id"])
        h, w = (int(v) for v in doc["size"])
        annotators = doc["annotators"]
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationError(f"manifest is missing image_id/size/annotators: {exc}") from exc
    sets = []
    for ann in annotators:
        polys = []
        for k, pd in enumerate(ann.get("polygons", [])):
            labels = [_resolve_label(l, ontology, synonyms, level) for l in pd.get("labels", [])]
            raw = pd.get("raw_label")
            if not labels and raw:
                labels = [normalize_free_text(raw, ontology, synonyms, level)]
            polys.append(PolygonRecord(
                vertices=np.asarray(pd["vertices"], dtype=np.float64),
                class_ids=tuple(labels),
                created_seq=int(pd.get("created_seq", k)),
                source_grade=int(pd.get("source_grade", 0)),
                raw_label=raw,
            ))
        sets.append(AnnotationSet(image_id, str(ann["annotator_id"]), polys, (h, w), level))
    ids = [s.annotator_id for s in sets]
    if len(set(ids)) != len(ids):
        raise AnnotationError(f"{image_id}: duplicate annotator ids {ids}")
    path = doc.get("image_path")
    if path is not None:
        path = Path(path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
    score = doc.get("gleason_score")
    return ImageRecord(
        image_id=image_id,
        image_path=path,
        size=(h, w),
        annotation_sets=sets,
        spacing=float(doc["spacing"]) if doc.get("spacing") is not None else None,
        gleason_score=tuple(int(g) for g in score) if score else None,
        extra={k: v for k, v in doc.items() if k not in {
            "image_id", "image_path", "size", "annotators", "spacing", "gleason_score", "level"}},
    )


def load_manifest(path: str | Path, ontology: Ontology,
                  synonyms: Mapping[str, int] | None = None) -> list[ImageRecord]:
    """Load a manifest file: one image object, a list of them, or ``{"images": [...]}``."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if isinstance(doc, dict) and "images" in doc:
        docs = doc["images"]
    elif isinstance(doc, list):
        docs = doc
    else:
        docs = [doc]
    if synonyms is None:
        synonyms = load_synonyms(ontology=ontology)
    return [parse_manifest(d, ontology, synonyms, path.parent) for d in docs]


def record_to_dict(rec: ImageRecord, base_dir: Path | None = None) -> dict:
    image_path = None
    if rec.image_path is not None:
        image_path = str(rec.image_path.relative_to(base_dir) if base_dir else rec.image_path)
    doc = {
        "image_id": rec.image_id,
        "image_path": image_path,
        "size": list(rec.size),
        "level": rec.annotation_sets[0].level if rec.annotation_sets else "sub_explanation",
        "annotators": [
            {"annotator_id": s.annotator_id,
             "polygons": [
                 {"vertices": np.round(p.vertices, 6).tolist(), "labels": list(p.class_ids),
                  "raw_label": p.raw_label, "created_seq": p.created_seq,
                  "source_grade": p.source_grade}
                 for p in s.polygons]}
            for s in rec.annotation_sets],
    }
    if rec.spacing is not None:
        doc["spacing"] = rec.spacing
    if rec.gleason_score is not None:
        doc["gleason_score"] = list(rec.gleason_score)
    doc.update(rec.extra)
    return doc


def rasterize_record(rec: ImageRecord, ontology: Ontology,
                     level: str | None = None) -> tuple[list[AnnotatorMask], list[CleaningReport]]:
    """Clean and rasterize every annotator of an image; optionally remap to ``level``."""
    masks, reports = [], []
    for aset in rec.annotation_sets:
        polys, report = clean_polygons(aset.polygons)
        mask = rasterize(replace(aset, polygons=polys), ontology)
        if level is not None:
            mask = mask.remap(ontology, level)
        masks.append(mask)
        reports.append(report)
    return masks, reports


def used_labels(aset: AnnotationSet, ontology: Ontology, level: str) -> set[int]:
    """Class ids (at ``level``) that an annotator used at least once, after cleaning."""
    polys, _ = clean_polygons(aset.polygons)
    ids = {c for p in polys for c in p.class_ids}
    if level != aset.level:
        anc = ontology.ancestor_map(aset.level, level)
        ids = {int(anc[c]) for c in ids}
    return ids


def iter_sets(records: Iterable[ImageRecord]):
    for rec in records:
        yield from rec.annotation_sets
