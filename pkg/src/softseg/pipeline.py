"""Glue from manifest records to model-ready images and soft labels."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotations import AnnotatorMask, ImageRecord, rasterize_record, scale_annotation_set
from .fusion import SoftLabelMap, build_soft_labels
from .imaging import WORKING_SPACING, foreground_mask, read_png, resample_bicubic
from .model import TrainSample
from .ontology import Ontology


@dataclass
class PreparedImage:
    image_id: str
    pixels: np.ndarray | None  # H x W x 3 at the working spacing, None without an image file
    masks: list[AnnotatorMask]
    soft: SoftLabelMap


def _has_image(rec: ImageRecord) -> bool:
    return rec.image_path is not None and Path(rec.image_path).is_file()


def prepare_record(rec: ImageRecord, ontology: Ontology, level: str, resample: bool = True,
                   require_image: bool = False) -> PreparedImage:
    """Rasterize, fuse and (when an image file exists) resample and mask one record.

    Without an image the whole frame counts as foreground.
    """
    pixels = None
    if _has_image(rec):
        spacing = rec.spacing or WORKING_SPACING
        img = read_png(rec.image_path, spacing)
        if img.shape != tuple(rec.size):
            raise ValueError(f"{rec.image_id}: image is {img.shape}, manifest says {tuple(rec.size)}")
        if resample and spacing != WORKING_SPACING:
            img = resample_bicubic(img, WORKING_SPACING)
            factor = img.shape[1] / rec.size[1]
            rec = replace(rec, size=img.shape, annotation_sets=[
                scale_annotation_set(s, factor, img.shape) for s in rec.annotation_sets])
        pixels = img.pixels
        fg = foreground_mask(img).mask
    elif require_image:
        raise FileNotFoundError(f"{rec.image_id}: image file {rec.image_path} not found")
    else:
        fg = np.ones(tuple(rec.size), dtype=bool)
    masks, _ = rasterize_record(rec, ontology, level)
    soft = build_soft_labels(masks, fg, level, ontology)
    return PreparedImage(rec.image_id, pixels, masks, soft)


def prepare_records(records: Sequence[ImageRecord], ontology: Ontology, level: str,
                    require_image: bool = False) -> list[PreparedImage]:
    return [prepare_record(r, ontology, level, require_image=require_image) for r in records]


def class_mass(prepared: Sequence[PreparedImage]) -> np.ndarray:
    """``N x C`` soft class mass per image, the input of the split optimizer."""
    return np.stack([p.soft.probs.reshape(-1, p.soft.n_classes).sum(axis=0) for p in prepared])


def train_samples(prepared: Sequence[PreparedImage]) -> list[TrainSample]:
    return [TrainSample(p.pixels, p.soft) for p in prepared]
