"""Three-level label hierarchy and probability-conserving upward remapping.

Levels are ordered from coarse to fine::

    pattern  ->  explanation  ->  sub_explanation

Class ``0`` is the benign class at every level and is its own parent one
level up.  Probability vectors are remapped upward by summing the mass of
all descendants of each target class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

LEVELS = ("pattern", "explanation", "sub_explanation")
SCHEMA_VERSION = 1


class OntologyError(ValueError):
    """Raised when an ontology file violates the schema or tree invariants."""


def level_index(level: str) -> int:
    try:
        return LEVELS.index(level)
    except ValueError:
        raise ValueError(f"unknown ontology level {level!r}; expected one of {LEVELS}") from None


@dataclass(frozen=True)
class OntologyNode:
    id: int
    name: str
    short_name: str
    level: str
    parent_id: int | None
    display_color: tuple[int, int, int]


@dataclass(frozen=True)
class Ontology:
    nodes: tuple[OntologyNode, ...]
    level_sizes: dict[str, int]
    _parents: dict[str, np.ndarray] = field(repr=False, compare=False, default_factory=dict)

    def classes(self, level: str) -> list[OntologyNode]:
        level_index(level)
        return sorted((n for n in self.nodes if n.level == level), key=lambda n: n.id)

    def names(self, level: str) -> list[str]:
        return [n.name for n in self.classes(level)]

    def short_names(self, level: str) -> list[str]:
        return [n.short_name for n in self.classes(level)]

    def colors(self, level: str) -> np.ndarray:
        return np.array([n.display_color for n in self.classes(level)], dtype=np.uint8)

    def parent_map(self, level: str) -> np.ndarray:
        """Child -> parent index map (``phi``) from ``level`` to the level above."""
        if level_index(level) == 0:
            raise ValueError("pattern level has no parent level")
        return self._parents[level].copy()

    def ancestor_map(self, level: str, target: str) -> np.ndarray:
        """Index map from classes of ``level`` to their ancestor at ``target``."""
        src, dst = level_index(level), level_index(target)
        if dst > src:
            raise ValueError(f"{target!r} is not above {level!r}")
        idx = np.arange(self.level_sizes[level])
        for k in range(src, dst, -1):
            idx = self._parents[LEVELS[k]][idx]
        return idx

    def remap_matrix(self, level: str, target: str) -> np.ndarray:
        """0/1 matrix ``M`` with ``dist @ M`` giving the distribution at ``target``."""
        anc = self.ancestor_map(level, target)
        m = np.zeros((self.level_sizes[level], self.level_sizes[target]))
        m[np.arange(anc.size), anc] = 1.0
        return m

    def class_id(self, level: str, short_name: str) -> int:
        for n in self.classes(level):
            if n.short_name == short_name:
                return n.id
        raise KeyError(f"no class with short name {short_name!r} at level {level!r}")

    def pattern_id_for_grade(self, grade: int) -> int:
        """Pattern-level class id of Gleason grade 3, 4 or 5."""
        return self.class_id("pattern", str(int(grade)))


def _parse_levels(doc: dict) -> list[tuple[str, list[dict]]]:
    if not isinstance(doc, dict):
        raise OntologyError("ontology document must be a JSON object")
    if doc.get("version") != SCHEMA_VERSION:
        raise OntologyError(f"unsupported ontology version {doc.get('version')!r}")
    levels = doc.get("levels")
    if not isinstance(levels, list) or not levels:
        raise OntologyError("'levels' must be a non-empty list")
    if len(levels) > len(LEVELS):
        raise OntologyError(f"at most {len(LEVELS)} levels are supported")
    out = []
    for k, lvl in enumerate(levels):
        if not isinstance(lvl, dict) or not isinstance(lvl.get("classes"), list):
            raise OntologyError(f"level {k} must be an object with a 'classes' list")
        name = lvl.get("name", LEVELS[k])
        if name != LEVELS[k]:
            raise OntologyError(f"level {k} must be named {LEVELS[k]!r}, got {name!r}")
        out.append((name, lvl["classes"]))
    return out


def ontology_from_dict(doc: dict) -> Ontology:
    """Validate a parsed ontology document and build an :class:`Ontology`."""
    nodes: list[OntologyNode] = []
    sizes: dict[str, int] = {}
    parents: dict[str, np.ndarray] = {}
    prev_ids: set[int] | None = None
    for k, (level, classes) in enumerate(_parse_levels(doc)):
        seen: dict[int, OntologyNode] = {}
        for entry in classes:
            try:
                cid = entry["id"]
                name = str(entry["name"])
                short = str(entry.get("short_name", name))
                parent = entry.get("parent_id")
                color = tuple(int(v) for v in entry.get("color", (128, 128, 128)))
            except (KeyError, TypeError, ValueError) as exc:
                raise OntologyError(f"malformed class entry at level {level!r}: {entry!r}") from exc
            if not isinstance(cid, int) or isinstance(cid, bool):
                raise OntologyError(f"class id {cid!r} at level {level!r} is not an integer")
            if len(color) != 3 or not all(0 <= v <= 255 for v in color):
                raise OntologyError(f"node {cid} at level {level!r}: color must be an RGB triple")
            if cid in seen:
                raise OntologyError(f"duplicate id {cid} at level {level!r}")
            if k == 0:
                if parent is not None:
                    raise OntologyError(f"node {cid}: pattern-level nodes have no parent")
            elif parent is None or parent not in prev_ids:
                raise OntologyError(
                    f"orphan node {cid} at level {level!r}: parent {parent!r} "
                    f"is not a class of level {LEVELS[k - 1]!r}"
                )
            seen[cid] = OntologyNode(cid, name, short, level, parent, color)
        ids = sorted(seen)
        if ids != list(range(len(ids))):
            missing = sorted(set(range(max(ids, default=-1) + 1)) - set(ids))
            bad = missing[0] if missing else ids[-1]
            raise OntologyError(f"ids at level {level!r} are not dense 0..C-1 (near id {bad})")
        if not ids:
            raise OntologyError(f"level {level!r} has no classes")
        if k > 0 and seen[0].parent_id != 0:
            raise OntologyError(f"node 0 at level {level!r}: benign must be a child of benign")
        sizes[level] = len(ids)
        if k > 0:
            parents[level] = np.array([seen[i].parent_id for i in ids], dtype=np.intp)
        nodes.extend(seen[i] for i in ids)
        prev_ids = set(ids)
    return Ontology(tuple(nodes), sizes, parents)


def load_ontology(path: str | Path | None = None) -> Ontology:
    """Load and validate an ontology file; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("softseg.data").joinpath("gleason_ontology.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise OntologyError(f"ontology file is not valid JSON: {exc}") from exc
    return ontology_from_dict(doc)


def ontology_to_dict(ontology: Ontology) -> dict:
    levels = []
    for level in LEVELS:
        if level not in ontology.level_sizes:
            break
        levels.append({
            "name": level,
            "classes": [
                {"id": n.id, "name": n.name, "short_name": n.short_name,
                 "parent_id": n.parent_id, "color": list(n.display_color)}
                for n in ontology.classes(level)
            ],
        })
    return {"version": SCHEMA_VERSION, "levels": levels}


def remap_up(dist: np.ndarray, ontology: Ontology, level: str, target: str,
             axis: int = -1) -> np.ndarray:
    """Sum per-class probabilities of ``level`` into their ancestors at ``target``.

    ``dist`` may have any shape; ``axis`` holds the classes of ``level``.
    ``target`` must be strictly above ``level``.
    """
    if level_index(target) >= level_index(level):
        raise ValueError(f"target level {target!r} is not above {level!r}")
    dist = np.asarray(dist, dtype=np.float64)
    moved = np.moveaxis(dist, axis, -1)
    if moved.shape[-1] != ontology.level_sizes[level]:
        raise ValueError(
            f"class axis has {moved.shape[-1]} entries, level {level!r} has "
            f"{ontology.level_sizes[level]}"
        )
    anc = ontology.ancestor_map(level, target)
    out = np.zeros(moved.shape[:-1] + (ontology.level_sizes[target],))
    # ordered per-child accumulation keeps results independent of memory layout
    for child, parent in enumerate(anc):
        out[..., parent] += moved[..., child]
    return np.moveaxis(out, -1, axis)


def hard_remap_up(labels: np.ndarray, ontology: Ontology, level: str, target: str) -> np.ndarray:
    """Remap integer class indices; negative entries (invalid) are kept."""
    labels = np.asarray(labels)
    anc = ontology.ancestor_map(level, target)
    return np.where(labels >= 0, anc[np.clip(labels, 0, None)], labels)


def toy_ontology(pattern_names: Sequence[str] = ("benign", "A"),
                 explanation_parents: Sequence[int] = (0, 1)) -> Ontology:
    """Small two-level ontology, handy for tests and demos."""
    doc = {
        "version": SCHEMA_VERSION,
        "levels": [
            {"name": "pattern", "classes": [
                {"id": i, "name": n, "short_name": n, "parent_id": None, "color": [i * 40 % 256] * 3}
                for i, n in enumerate(pattern_names)]},
            {"name": "explanation", "classes": [
                {"id": i, "name": f"e{i}", "short_name": f"e{i}", "parent_id": p,
                 "color": [(i * 70) % 256, 100, 200]}
                for i, p in enumerate(explanation_parents)]},
        ],
    }
    return ontology_from_dict(doc)
