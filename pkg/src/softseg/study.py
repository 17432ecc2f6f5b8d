"""Soft-versus-hard label study on a synthetic corpus.

Three arms share one corpus and one split:

* ``soft-fine``: SoftDice on soft explanation labels,
* ``hardce-fine``: cross-entropy on majority-voted explanation labels,
* ``harddice-coarse``: hard Dice on majority-voted pattern labels.

Every arm is trained with several seeds and evaluated on the test split
after remapping predictions to the pattern level.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .inference import sliding_window_predict
from .metrics import MetricsReport, evaluate, report_to_dict, summarize
from .model import TrainerConfig, TrainSample, train
from .ontology import Ontology, load_ontology
from .splitter import optimize_split
from .synthkit import SynthImage, generate_corpus, gleason_study_config

log = logging.getLogger(__name__)

ARMS = {
    "soft-fine": ("softdice", "explanation"),
    "hardce-fine": ("ce-hard", "explanation"),
    "harddice-coarse": ("dice-hard", "pattern"),
}


@dataclass
class StudyConfig:
    n_images: int = 200
    image_size: int = 48
    patch_size: int = 32
    epochs: int = 30
    batch_size: int = 12
    lr0: float = 3e-3
    seeds: tuple[int, ...] = (1, 2, 3)
    data_seed: int = 0
    split_iters: int = 2000
    overlap: float = 0.5
    arms: tuple[str, ...] = tuple(ARMS)


@dataclass
class StudyResult:
    config: StudyConfig
    runs: dict[str, list[MetricsReport]]
    split_sizes: dict[str, int]
    seconds: float
    logs: dict[str, list[list[dict]]] = field(default_factory=dict)

    def summary(self) -> dict:
        return {arm: summarize(reps) for arm, reps in self.runs.items()}

    def mean(self, arm: str, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.runs[arm]]))

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["seeds"] = list(cfg["seeds"])
        cfg["arms"] = list(cfg["arms"])
        return {
            "config": cfg,
            "split_sizes": self.split_sizes,
            "summary": self.summary(),
            "runs": {arm: [report_to_dict(r) for r in reps] for arm, reps in self.runs.items()},
            "seconds": self.seconds,
        }


def class_counts(items: Sequence[SynthImage], ontology: Ontology, level: str) -> np.ndarray:
    """Per-image soft class mass over foreground pixels (rows of the split objective)."""
    return np.stack([it.soft_labels(ontology, level).probs.reshape(-1, ontology.level_sizes[level]).sum(axis=0)
                     for it in items])


def run_soft_vs_hard(config: StudyConfig | None = None, ontology: Ontology | None = None,
                     on_run: Callable[[str, int, MetricsReport], None] | None = None) -> StudyResult:
    config = config or StudyConfig()
    ontology = ontology or load_ontology()
    t0 = time.perf_counter()
    synth = gleason_study_config(seed=config.data_seed, size=config.image_size, ontology=ontology)
    corpus = generate_corpus(synth, config.n_images, ontology)
    split = optimize_split(class_counts(corpus, ontology, "explanation"), iters=config.split_iters,
                           seed=config.data_seed)
    fine = [it.soft_labels(ontology) for it in corpus]
    images = [it.scene.image.pixels for it in corpus]
    test_idx = split.indices("test")
    runs: dict[str, list[MetricsReport]] = {}
    logs: dict[str, list[list[dict]]] = {}
    for arm in config.arms:
        loss, level = ARMS[arm]
        labels = [s.remap(ontology, level) for s in fine]

        def samples(tag):
            return [TrainSample(images[i], labels[i]) for i in split.indices(tag)]

        runs[arm], logs[arm] = [], []
        for seed in config.seeds:
            tc = TrainerConfig(lr0=config.lr0, batch_size=config.batch_size, epochs=config.epochs,
                               seed=seed, loss=loss, level=level, patch_size=config.patch_size)
            result = train(tc, samples("train"), samples("val"), ontology)
            model = result.best.model()
            preds = [sliding_window_predict(model, images[i], window=config.patch_size,
                                            overlap=config.overlap, level=level).probs
                     for i in test_idx]
            report = evaluate(preds, [fine[i] for i in test_idx], ontology, "pattern", trained_level=level)
            runs[arm].append(report)
            logs[arm].append(result.log)
            log.info("%s seed %d: macro dice %.4f dice %.4f (best epoch %d)", arm, seed,
                     report.macro_dice, report.dice, result.best.epoch)
            if on_run is not None:
                on_run(arm, seed, report)
    return StudyResult(config, runs, split.sizes(), time.perf_counter() - t0, logs)


def directional_checks(result: StudyResult, macro_margin: float = 0.05, dice_slack: float = 0.02) -> dict:
    """The two ordinal comparisons of the study, with the numbers behind them."""
    soft_macro = result.mean("soft-fine", "macro_dice")
    hard_macro = result.mean("hardce-fine", "macro_dice")
    soft_dice = result.mean("soft-fine", "dice")
    coarse_dice = result.mean("harddice-coarse", "dice")
    return {
        "soft_macro_dice": soft_macro,
        "hardce_macro_dice": hard_macro,
        "macro_dice_gap_ok": soft_macro >= hard_macro + macro_margin,
        "soft_dice": soft_dice,
        "coarse_dice": coarse_dice,
        "dice_vs_coarse_ok": soft_dice >= coarse_dice - dice_slack,
    }
