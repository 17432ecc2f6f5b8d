"""Train/val/test assignment that balances class pixel distributions across splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass
class SplitAssignment:
    splits: list[str]  # one tag per image
    objective: float
    history: list[tuple[int, float]] = field(default_factory=list)  # (iteration, objective) on acceptance
    seed: int = 0
    restart: int = 0

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def sizes(self) -> dict[str, int]:
        return {s: self.splits.count(s) for s in SPLITS}


def split_sizes(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> list[int]:
    """Largest-remainder rounding of ``n * f``; every split gets an image when ``n >= 3``."""
    fr = np.asarray(fractions, dtype=np.float64)
    if len(fr) != 3 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    if n < 3:
        raise ValueError("need at least 3 images")
    raw = n * fr
    sizes = np.floor(raw).astype(int)
    order = sorted(range(3), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[: n - sizes.sum()]:
        sizes[k] += 1
    for k in range(3):
        if sizes[k] == 0:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[k] += 1
    return sizes.tolist()


def _distribution(total: np.ndarray) -> np.ndarray:
    s = total.sum()
    return total / s if s > 0 else np.zeros_like(total)


def split_objective(counts: np.ndarray, tags: np.ndarray) -> float:
    """Sum over split pairs of half the L1 distance between their class distributions."""
    counts = np.asarray(counts, dtype=np.float64)
    dists = [_distribution(counts[tags == k].sum(axis=0)) for k in range(3)]
    return float(sum(0.5 * np.abs(dists[a] - dists[b]).sum() for a, b in combinations(range(3), 2)))


def _objective_from_totals(totals: np.ndarray) -> float:
    d = [_distribution(t) for t in totals]
    return float(sum(0.5 * np.abs(d[a] - d[b]).sum() for a, b in combinations(range(3), 2)))


def _climb(counts: np.ndarray, sizes: Sequence[int], iters: int, rng: np.random.Generator):
    n = counts.shape[0]
    tags = np.repeat(np.arange(3), sizes)
    rng.shuffle(tags)
    totals = np.stack([counts[tags == k].sum(axis=0) for k in range(3)])
    obj = _objective_from_totals(totals)
    history = [(0, obj)]
    for it in range(1, iters + 1):
        i = int(rng.integers(n))
        others = np.flatnonzero(tags != tags[i])
        j = int(others[rng.integers(len(others))])
        a, b = tags[i], tags[j]
        trial = totals.copy()
        trial[a] += counts[j] - counts[i]
        trial[b] += counts[i] - counts[j]
        new = _objective_from_totals(trial)
        if new < obj:
            tags[i], tags[j] = b, a
            totals, obj = trial, new
            history.append((it, obj))
    return tags, obj, history


def optimize_split(counts, fractions: Sequence[float] = DEFAULT_FRACTIONS, iters: int = 10000,
                   seed: int = 0, restarts: int = 1) -> SplitAssignment:
    """Hill-climb over cross-split swaps from seeded random size-respecting starts.

    ``counts`` is ``N x C`` per-image class pixel counts.  The best restart
    wins; ties keep the earliest restart.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2:
        raise ValueError("counts must be N x C")
    if counts.sum() <= 0:
        raise ValueError("class counts are empty")
    if np.any(counts < 0):
        raise ValueError("class counts must be non-negative")
    sizes = split_sizes(counts.shape[0], fractions)
    best = None
    for r in range(max(1, restarts)):
        tags, obj, history = _climb(counts, sizes, iters, np.random.default_rng([seed, r]))
        if best is None or obj < best.objective:
            best = SplitAssignment([SPLITS[t] for t in tags], obj, history, seed, r)
    return best


def write_split(path: str | Path, image_ids: Sequence[str], assignment: SplitAssignment,
                level: str | None = None, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> None:
    doc = {
        "objective": assignment.objective,
        "seed": assignment.seed,
        "restart": assignment.restart,
        "level": level,
        "fractions": list(fractions),
        "sizes": assignment.sizes(),
        "assignment": {iid: s for iid, s in zip(image_ids, assignment.splits)},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_split(path: str | Path) -> dict[str, str]:
    return json.loads(Path(path).read_text())["assignment"]
