"""Synthetic TMA-like scenes and simulated disagreeing annotators.

A scene is a dark textured disk on a white slide, cut into Voronoi regions
whose classes are drawn from a (possibly very imbalanced) prior.  A rater
relabels each region through its own row-stochastic confusion matrix and
shifts region boundaries by a per-region dilation or erosion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

from .annotations import AnnotatorMask
from .fusion import SoftLabelMap, build_soft_labels
from .imaging import RasterImage, disk
from .ontology import Ontology, level_index, load_ontology


@dataclass(frozen=True)
class ClassTexture:
    color: tuple[float, float, float]
    stripe_freq: float = 0.0  # cycles per pixel
    stripe_angle: float = 0.0  # radians
    stripe_amp: float = 0.15
    noise: float = 0.03


# ten tissue colours, all clearly darker than the slide background
_BASE_COLORS = (
    (0.80, 0.62, 0.75), (0.55, 0.30, 0.55), (0.70, 0.45, 0.30), (0.35, 0.35, 0.65),
    (0.30, 0.60, 0.55), (0.60, 0.25, 0.30), (0.25, 0.25, 0.35), (0.65, 0.55, 0.25),
    (0.45, 0.60, 0.30), (0.40, 0.20, 0.20),
)

# explanation-level prior: benign, 3-individual, 3-compressed, 4-cribriform,
# 4-glomeruloid, 4-poorly formed, 5-comedo, 5-cords, 5-groups, 5-single cells
GLEASON_EXPLANATION_PRIOR = (0.30, 0.25, 0.05, 0.12, 0.015, 0.15, 0.05, 0.03, 0.025, 0.01)


def default_palette(n_classes: int) -> tuple[ClassTexture, ...]:
    out = []
    for c in range(n_classes):
        color = _BASE_COLORS[c % len(_BASE_COLORS)]
        out.append(ClassTexture(color, stripe_freq=(0.0, 0.12, 0.25)[c % 3],
                                stripe_angle=np.pi * c / max(1, n_classes)))
    return tuple(out)


@dataclass
class SynthConfig:
    size: int = 48
    core_radius: float = 20.0
    n_regions: int = 8
    n_classes: int = 10
    raters: int = 3
    rho: np.ndarray | None = None  # C x C or K x C x C; identity when None
    jitter: int = 1
    prior: Sequence[float] | None = None  # uniform when None
    palette: tuple[ClassTexture, ...] | None = None
    seed: int = 0
    level: str = "explanation"

    def __post_init__(self):
        if self.prior is None:
            self.prior = np.full(self.n_classes, 1.0 / self.n_classes)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        if self.prior.shape != (self.n_classes,) or np.any(self.prior < 0) or abs(self.prior.sum() - 1) > 1e-9:
            raise ValueError("prior must be a distribution over the classes")
        if self.palette is None:
            self.palette = default_palette(self.n_classes)
        if len(self.palette) != self.n_classes:
            raise ValueError("palette needs one texture per class")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if self.raters < 1 or self.n_regions < 1 or self.size < 2:
            raise ValueError("raters, regions and size must be positive")
        rho = np.eye(self.n_classes) if self.rho is None else np.asarray(self.rho, dtype=np.float64)
        if rho.ndim == 2:
            rho = np.broadcast_to(rho, (self.raters,) + rho.shape).copy()
        if rho.shape != (self.raters, self.n_classes, self.n_classes):
            raise ValueError(f"rho must be C x C or K x C x C, got {rho.shape}")
        if np.any(rho < 0) or np.max(np.abs(rho.sum(axis=-1) - 1)) > 1e-9:
            raise ValueError("rho rows must be probability distributions")
        self.rho = rho


@dataclass
class Scene:
    image: RasterImage
    truth: np.ndarray  # H x W class ids, 0 outside the core
    foreground: np.ndarray  # H x W bool disk
    regions: np.ndarray  # H x W region index, -1 outside the core
    region_labels: np.ndarray  # per-region true class


# ---------------------------------------------------------------- scenes

def _texture(tex: ClassTexture, yy, xx, rng) -> np.ndarray:
    phase = 2 * np.pi * tex.stripe_freq * (xx * np.cos(tex.stripe_angle) + yy * np.sin(tex.stripe_angle))
    shade = 1.0 + tex.stripe_amp * np.sin(phase) if tex.stripe_freq > 0 else np.ones_like(yy, dtype=float)
    rgb = shade[..., None] * np.asarray(tex.color)
    return rgb + tex.noise * rng.standard_normal(rgb.shape)


def generate_scene(config: SynthConfig, index: int = 0) -> Scene:
    """Scene number ``index`` of the corpus defined by ``config`` (seeded by both)."""
    rng = np.random.default_rng([config.seed, index, 0])
    n = config.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    c = (n - 1) / 2.0
    fg = (yy - c) ** 2 + (xx - c) ** 2 <= config.core_radius ** 2
    seeds = c + rng.uniform(-config.core_radius, config.core_radius, (config.n_regions, 2))
    labels = rng.choice(config.n_classes, size=config.n_regions, p=config.prior)
    d2 = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    regions = np.where(fg, d2.argmin(axis=-1), -1)
    truth = np.where(fg, labels[np.maximum(regions, 0)], 0)
    pixels = 0.96 + 0.02 * rng.standard_normal((n, n, 3))
    for cls in np.unique(truth[fg]):
        sel = fg & (truth == cls)
        pixels[sel] = _texture(config.palette[cls], yy, xx, rng)[sel]
    return Scene(RasterImage(pixels), truth, fg, regions, labels)


# ---------------------------------------------------------------- raters

def _shift_region(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius > 0:
        return ndimage.binary_dilation(mask, disk(radius), border_value=0)
    if radius < 0:
        return ndimage.binary_erosion(mask, disk(-radius), border_value=1)
    return mask


def rater_regions(scene: Scene, rho: np.ndarray, jitter: int, rng: np.random.Generator):
    """Per-region ``(label, pixel mask)`` pairs as one rater would draw them."""
    out = []
    for r, true in enumerate(scene.region_labels):
        label = int(rng.choice(rho.shape[1], p=rho[true]))
        radius = int(rng.integers(-jitter, jitter + 1)) if jitter else 0
        mask = _shift_region(scene.regions == r, radius) & scene.foreground
        if mask.any():
            out.append((label, mask))
    return out


def _paint_order(regions, ontology: Ontology | None, level: str):
    if ontology is None or level_index(level) == 0:
        grade = [lab for lab, _ in regions]
    else:
        anc = ontology.ancestor_map(level, "pattern")
        grade = [int(anc[lab]) for lab, _ in regions]
    return sorted(range(len(regions)), key=lambda i: (grade[i], i))


def paint_regions(regions, shape, n_classes: int, level: str, ontology: Ontology | None = None) -> AnnotatorMask:
    """Paint non-benign regions in ascending grade order; benign stays unannotated."""
    weights = np.zeros(shape + (n_classes,))
    for i in _paint_order(regions, ontology, level):
        label, mask = regions[i]
        if label == 0:
            continue
        weights[mask] = 0.0
        weights[mask, label] = 1.0
    return AnnotatorMask(weights, level)


def simulate_rater(scene: Scene, rho: np.ndarray, jitter: int, seed, level: str = "explanation",
                   ontology: Ontology | None = None) -> AnnotatorMask:
    rho = np.asarray(rho, dtype=np.float64)
    regions = rater_regions(scene, rho, jitter, np.random.default_rng(seed))
    return paint_regions(regions, scene.truth.shape, rho.shape[1], level, ontology)


def region_polygon(mask: np.ndarray) -> np.ndarray:
    """Convex outline (x, y) enclosing the centres of a convex pixel region."""
    ys, xs = np.nonzero(mask)
    pts = np.concatenate([np.stack([xs + 0.5 + dx, ys + 0.5 + dy], axis=1)
                          for dx in (-0.49, 0.49) for dy in (-0.49, 0.49)])
    hull = ConvexHull(pts)
    return pts[hull.vertices]


# ---------------------------------------------------------- confusion models

def identity_rho(n_classes: int) -> np.ndarray:
    return np.eye(n_classes)


def uniform_rho(n_classes: int) -> np.ndarray:
    return np.full((n_classes, n_classes), 1.0 / n_classes)


def blend_rho(n_classes: int, off_diagonal: float) -> np.ndarray:
    """``(1 - a) I + a U``; larger ``a`` means more disagreement."""
    return (1.0 - off_diagonal) * identity_rho(n_classes) + off_diagonal * uniform_rho(n_classes)


def sibling_confusion_rho(ontology: Ontology, level: str = "explanation", raters: int = 3,
                          systematic: float = 0.7, spread: float = 0.2, cross: float = 0.05,
                          benign_keep: float = 0.95) -> np.ndarray:
    """Per-rater confusion where each rater systematically favours a different sibling.

    Rater ``k`` labels a region of class ``c`` as the sibling ``k`` places
    after ``c`` (among classes sharing its parent) with mass ``systematic``,
    spreads ``spread`` uniformly over the siblings, and moves ``cross`` to
    other non-benign classes.  The remainder stays on ``c``.
    """
    if systematic + spread + cross > 1 + 1e-12:
        raise ValueError("systematic + spread + cross must not exceed 1")
    phi = ontology.parent_map(level)
    c_count = len(phi)
    rho = np.zeros((raters, c_count, c_count))
    for k in range(raters):
        for c in range(c_count):
            if c == 0:
                rho[k, 0, 0] = benign_keep
                rho[k, 0, 1:] = (1 - benign_keep) / (c_count - 1)
                continue
            sib = [s for s in range(1, c_count) if phi[s] == phi[c]]
            others = [s for s in range(1, c_count) if phi[s] != phi[c]]
            pos = sib.index(c)
            rho[k, c, sib[(pos + k) % len(sib)]] += systematic
            rho[k, c, sib] += spread / len(sib)
            if others:
                rho[k, c, others] += cross / len(others)
            rho[k, c, c] += 1.0 - systematic - spread - (cross if others else 0.0)
    return rho


# ----------------------------------------------------------------- corpora

@dataclass
class SynthImage:
    image_id: str
    scene: Scene
    raters: list[AnnotatorMask]
    rater_regions: list[list] = field(default_factory=list)

    def soft_labels(self, ontology: Ontology | None = None, level: str | None = None) -> SoftLabelMap:
        ontology = ontology or load_ontology()
        soft = build_soft_labels(self.raters, self.scene.foreground, self.raters[0].level, ontology)
        if level is not None and level != soft.level:
            soft = soft.remap(ontology, level)
        return soft


def synth_image(config: SynthConfig, index: int, ontology: Ontology | None = None) -> SynthImage:
    scene = generate_scene(config, index)
    masks, regs = [], []
    for k in range(config.raters):
        regions = rater_regions(scene, config.rho[k], config.jitter,
                                np.random.default_rng([config.seed, index, 1 + k]))
        regs.append(regions)
        masks.append(paint_regions(regions, scene.truth.shape, config.n_classes, config.level, ontology))
    return SynthImage(f"synth_{config.seed}_{index:04d}", scene, masks, regs)


def generate_corpus(config: SynthConfig, n_images: int, ontology: Ontology | None = None) -> list[SynthImage]:
    return [synth_image(config, i, ontology) for i in range(n_images)]


def synth_manifest(item: SynthImage, image_path: str | None = None, ontology: Ontology | None = None) -> dict:
    """Annotation-manifest document for a synthetic image (benign regions left unannotated)."""
    level = item.raters[0].level
    anc = ontology.ancestor_map(level, "pattern") if ontology is not None and level_index(level) > 0 else None
    annotators = []
    for k, regions in enumerate(item.rater_regions):
        polys = []
        for seq, i in enumerate(_paint_order(regions, ontology, level)):
            label, mask = regions[i]
            if label == 0:
                continue
            polys.append({
                "vertices": region_polygon(mask).round(4).tolist(),
                "labels": [int(label)],
                "created_seq": seq,
                "source_grade": int(anc[label]) if anc is not None else int(label),
            })
        annotators.append({"annotator_id": f"rater{k + 1}", "polygons": polys})
    doc = {"image_id": item.image_id, "size": list(item.scene.truth.shape), "level": level,
           "annotators": annotators}
    if image_path is not None:
        doc["image_path"] = image_path
    return doc


def gleason_study_config(seed: int = 0, size: int = 48, ontology: Ontology | None = None, **overrides) -> SynthConfig:
    """Explanation-level corpus with heavy imbalance and sibling-level rater disagreement."""
    ontology = ontology or load_ontology()
    base = dict(size=size, core_radius=0.42 * size, n_regions=8, n_classes=10, raters=3,
                rho=sibling_confusion_rho(ontology), jitter=1, prior=GLEASON_EXPLANATION_PRIOR,
                seed=seed, level="explanation")
    base.update(overrides)
    return SynthConfig(**base)
