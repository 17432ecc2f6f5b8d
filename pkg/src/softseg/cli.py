"""Command-line interface.

Every command that writes files takes ``--out DIR`` and leaves a
``run_manifest.json`` there recording the argument vector, the resolved
configuration, seeds, input and output hashes.  ``softseg replay`` re-runs
a manifest into a fresh directory and can check the outputs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .agreement import (build_presence, grade_annotation_confusion, kappa_table, pixel_agreement_stats,
                        presence_heatmap, share_at_least, write_kappa_reports)
from .annotations import load_manifest, rasterize_record
from .fusion import SoftLabelMap, majority_vote, read_slt, staple_multiclass, write_slt
from .imaging import WORKING_SPACING, foreground_mask, read_png, resample_bicubic, write_png
from .inference import render_overlay, sliding_window_predict
from .metrics import evaluate, write_report
from .model import TrainerConfig, TrainingError, load_checkpoint, train
from .objectives import LOSS_IDS
from .ontology import LEVELS, OntologyError, load_ontology, ontology_to_dict
from .pipeline import class_mass, prepare_records, train_samples
from .splitter import DEFAULT_FRACTIONS, optimize_split, read_split, write_split
from .study import StudyConfig, directional_checks, run_soft_vs_hard
from .synthkit import (SynthConfig, blend_rho, gleason_study_config, identity_rho,
                       sibling_confusion_rho, synth_image, synth_manifest)

log = logging.getLogger("softseg")

RUN_MANIFEST = "run_manifest.json"
INPUT_ARGS = ("manifest", "split", "checkpoint", "image", "map", "config", "ontology")


class CliError(Exception):
    pass


# ------------------------------------------------------------------ utils

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _default_threads() -> int:
    env = os.environ.get("SOFTSEG_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _parse_seeds(text: str) -> tuple[int, ...]:
    """``"1,2,3"`` or ``"1..3"``."""
    if ".." in text:
        a, b = text.split("..", 1)
        return tuple(range(int(a), int(b) + 1))
    return tuple(int(s) for s in text.split(",") if s.strip())


def _parse_fractions(text: str) -> tuple[float, float, float]:
    vals = tuple(float(v) for v in text.split(","))
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("need three comma-separated fractions")
    return vals


def _records(args, ontology):
    return load_manifest(args.manifest, ontology)


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


# --------------------------------------------------------------- commands

def cmd_ontology_validate(args, ontology) -> list[str]:
    for level in LEVELS:
        if level in ontology.level_sizes:
            print(f"{level}: {ontology.level_sizes[level]} classes")
    if args.out:
        _dump(_out_dir(args) / "ontology.json", ontology_to_dict(ontology))
        return ["ontology.json"]
    return []


def cmd_rasterize(args, ontology) -> list[str]:
    out = _out_dir(args)
    written, cleaning = [], {}
    for rec in _records(args, ontology):
        masks, reports = rasterize_record(rec, ontology, args.level)
        d = out / _safe(rec.image_id)
        d.mkdir(exist_ok=True)
        cleaning[rec.image_id] = {}
        for aset, mask, rep in zip(rec.annotation_sets, masks, reports):
            name = f"{_safe(rec.image_id)}/{_safe(aset.annotator_id)}.npy"
            np.save(out / name, mask.weights)
            written.append(name)
            cleaning[rec.image_id][aset.annotator_id] = asdict(rep)
    _dump(out / "cleaning.json", cleaning)
    return written + ["cleaning.json"]


def cmd_fuse(args, ontology) -> list[str]:
    out = _out_dir(args)
    level = args.level or "explanation"
    records = _records(args, ontology)
    prepared = prepare_records(records, ontology, level)
    written, staple_info = [], {}
    for prep in prepared:
        base = _safe(prep.image_id)
        if args.method == "soft":
            sums = prep.soft.probs.sum(axis=-1)[prep.soft.foreground]
            if sums.size and np.abs(sums - 1).max() > 1e-6:
                raise CliError(f"{prep.image_id}: soft label rows do not sum to 1")
            write_slt(out / f"{base}.slt", prep.soft)
            written.append(f"{base}.slt")
        elif args.method == "majority":
            np.save(out / f"{base}_majority.npy", majority_vote(prep.soft).labels.astype(np.int16))
            written.append(f"{base}_majority.npy")
        else:
            hard = np.stack([np.where(m.annotated, m.weights.argmax(axis=-1), 0) for m in prep.masks])
            res = staple_multiclass(hard, ontology.level_sizes[level], tol=args.tol, max_iter=args.max_iter)
            consensus = np.where(prep.soft.foreground, res.consensus, 0).astype(np.int16)
            np.save(out / f"{base}_staple.npy", consensus)
            written.append(f"{base}_staple.npy")
            staple_info[prep.image_id] = {"sensitivity": res.sensitivity.tolist(),
                                          "specificity": res.specificity.tolist(),
                                          "iterations": res.iterations, "converged": res.converged,
                                          "ties": res.ties}
    if args.method == "staple":
        _dump(out / "staple.json", staple_info)
        written.append("staple.json")
    return written


def cmd_agree(args, ontology) -> list[str]:
    out = _out_dir(args)
    records = _records(args, ontology)
    level = args.level or "explanation"
    if args.what == "kappa":
        presence = build_presence(records, ontology, level)
        reports = kappa_table(presence, args.resamples, args.seed, args.threads, args.by_group)
        write_kappa_reports(reports, out / "kappa.json", out / "kappa.csv")
        return ["kappa.json", "kappa.csv"]
    if args.what == "heatmap":
        presence = build_presence(records, ontology, level)
        heat = presence_heatmap(presence)
        share = share_at_least(heat, 2)
        with open(out / "heatmap.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["label", *(f"raters_{k}" for k in range(heat.shape[1])), "share_at_least_2"])
            for name, row, s in zip(presence.label_names, heat, share):
                w.writerow([name, *row.tolist(), "NA" if np.isnan(s) else repr(float(s))])
        return ["heatmap.csv"]
    if args.what == "pixels":
        stats = {}
        for lvl in [l for l in LEVELS if l in ontology.level_sizes]:
            if args.level and lvl != args.level:
                continue
            try:
                prepared = prepare_records(records, ontology, lvl)
            except ValueError:
                continue  # annotations coarser than this level
            pa = pixel_agreement_stats([p.soft for p in prepared])
            stats[lvl] = {"counts": pa.counts.tolist(), "shares": pa.shares.tolist(),
                          "unique_majority_share": pa.unique_majority_share,
                          "foreground_pixels": pa.foreground_pixels,
                          "class_names": ontology.short_names(lvl)}
        _dump(out / "pixel_agreement.json", stats)
        return ["pixel_agreement.json"]
    given = {r.image_id: list(r.gleason_score) for r in records if r.gleason_score}
    gc = grade_annotation_confusion(given, records, ontology)
    _dump(out / "grade_confusion.json", {"rows_given_cols_annotated": ["GP3", "GP4", "GP5"],
                                         "matrix": gc.matrix.tolist(), "missed": gc.missed.tolist(),
                                         "skipped": gc.skipped})
    return ["grade_confusion.json"]


def cmd_split(args, ontology) -> list[str]:
    out = _out_dir(args)
    level = args.level or "explanation"
    records = _records(args, ontology)
    prepared = prepare_records(records, ontology, level)
    assignment = optimize_split(class_mass(prepared), args.fractions, args.iters, args.seed, args.restarts)
    write_split(out / "split.json", [p.image_id for p in prepared], assignment, level, args.fractions)
    print(f"objective {assignment.objective:.6f} sizes {assignment.sizes()}")
    return ["split.json"]


def _split_subsets(args, ontology, level):
    records = _records(args, ontology)
    split = read_split(args.split)
    missing = [r.image_id for r in records if r.image_id not in split]
    if missing:
        raise CliError(f"images missing from split file: {missing[:5]}")
    prepared = prepare_records(records, ontology, level, require_image=True)
    return {tag: [p for p in prepared if split[p.image_id] == tag] for tag in ("train", "val", "test")}


def _trainer_config(args) -> TrainerConfig:
    base = TrainerConfig() if args.full_scale else TrainerConfig.desk_scale()
    over = {k: getattr(args, k) for k in ("lr0", "epochs", "batch_size", "patch_size", "weight_decay",
                                          "tree_lambda") if getattr(args, k) is not None}
    return TrainerConfig.from_dict({**base.to_dict(), **over, "seed": args.seed, "loss": args.loss,
                                    "level": args.level or "explanation", "augment": not args.no_augment})


def cmd_train(args, ontology) -> list[str]:
    out = _out_dir(args)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        saved = dict(resume.config)
        if args.epochs is not None:
            saved["epochs"] = args.epochs
        config = TrainerConfig.from_dict(saved)
    else:
        config = _trainer_config(args)
    subsets = _split_subsets(args, ontology, config.level)
    result = train(config, train_samples(subsets["train"]), train_samples(subsets["val"]), ontology,
                   out_dir=out, resume=resume)
    _dump(out / "train_summary.json", {"best_epoch": result.best.epoch, "best_val_loss": result.best.val_loss,
                                       "config": config.to_dict(), "config_hash": config.config_hash()})
    print(f"best epoch {result.best.epoch} val loss {result.best.val_loss:.6f}")
    return sorted(p.name for p in out.iterdir() if p.suffix in (".mun", ".jsonl")) + ["train_summary.json"]


def _window(args, config: TrainerConfig) -> int:
    return args.window or config.patch_size


def cmd_eval(args, ontology) -> list[str]:
    out = _out_dir(args)
    ckpt = load_checkpoint(args.checkpoint)
    config = TrainerConfig.from_dict(ckpt.config)
    eval_level = args.eval_level or config.level
    subsets = _split_subsets(args, ontology, config.level)
    model = ckpt.model()
    items = subsets[args.subset]
    if not items:
        raise CliError(f"split {args.subset!r} is empty")
    preds = [sliding_window_predict(model, p.pixels, _window(args, config), args.overlap, level=config.level,
                                    threads=args.threads).probs for p in items]
    report = evaluate(preds, [p.soft for p in items], ontology, eval_level, trained_level=config.level)
    write_report(report, out / "metrics.json", out / "confusion.csv")
    print(f"macro softdice {report.macro_softdice:.4f} dice {report.dice:.4f} macro dice {report.macro_dice:.4f}")
    return ["metrics.json", "confusion.csv"]


def _load_image(args):
    img = read_png(args.image, args.spacing or WORKING_SPACING)
    if args.spacing and args.spacing != WORKING_SPACING:
        img = resample_bicubic(img, WORKING_SPACING)
    return img


def cmd_infer(args, ontology) -> list[str]:
    out = _out_dir(args)
    ckpt = load_checkpoint(args.checkpoint)
    config = TrainerConfig.from_dict(ckpt.config)
    img = _load_image(args)
    fg = foreground_mask(img).mask
    pred = sliding_window_predict(ckpt.model(), img.pixels, _window(args, config), args.overlap,
                                  level=config.level, foreground=fg, threads=args.threads)
    soft = SoftLabelMap(pred.probs, fg, np.zeros_like(fg), pred.level, 1)
    write_slt(out / "prediction.slt", soft)
    return ["prediction.slt"]


def cmd_render(args, ontology) -> list[str]:
    out = _out_dir(args)
    img = _load_image(args)
    label_map = read_slt(args.map)
    if label_map.shape != img.shape:
        raise CliError(f"map is {label_map.shape}, image is {img.shape}")
    if args.level and args.level != label_map.level:
        label_map = label_map.remap(ontology, args.level)
    write_png(out / "overlay.png", render_overlay(img.pixels, label_map, ontology, args.alpha))
    return ["overlay.png"]


def _synth_config(args, ontology) -> SynthConfig:
    n = 10 if "explanation" in ontology.level_sizes else ontology.level_sizes["pattern"]
    if args.disagreement == "sibling":
        return gleason_study_config(seed=args.seed, size=args.size, ontology=ontology, raters=args.raters,
                                    rho=sibling_confusion_rho(ontology, raters=args.raters),
                                    jitter=args.jitter)
    if args.disagreement == "none":
        rho = identity_rho(n)
    elif args.disagreement.startswith("blend:"):
        rho = blend_rho(n, float(args.disagreement.split(":", 1)[1]))
    else:
        raise CliError(f"unknown disagreement model {args.disagreement!r}")
    return gleason_study_config(seed=args.seed, size=args.size, ontology=ontology, raters=args.raters,
                                rho=rho, jitter=args.jitter)


def cmd_synth(args, ontology) -> list[str]:
    out = _out_dir(args)
    config = _synth_config(args, ontology)
    if args.what == "scene":
        item = synth_image(config, args.index, ontology)
        write_png(out / "image.png", item.scene.image.pixels)
        np.save(out / "truth.npy", item.scene.truth.astype(np.int16))
        np.save(out / "foreground.npy", item.scene.foreground)
        _dump(out / "scene.json", {"image_id": item.image_id, "region_labels": item.scene.region_labels.tolist()})
        return ["image.png", "truth.npy", "foreground.npy", "scene.json"]
    (out / "images").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    docs, written = [], []
    for i in range(args.n_images):
        item = synth_image(config, i, ontology)
        name = f"images/{item.image_id}.png"
        write_png(out / name, item.scene.image.pixels)
        written.append(name)
        for k, mask in enumerate(item.raters):
            mname = f"masks/{item.image_id}_rater{k + 1}.npy"
            np.save(out / mname, mask.weights)
            written.append(mname)
        docs.append(synth_manifest(item, name, ontology))
    _dump(out / "manifest.json", {"images": docs})
    return written + ["manifest.json"]


def cmd_repro(args, ontology) -> list[str]:
    out = _out_dir(args)
    cfg = StudyConfig(n_images=args.n_images, image_size=args.size, patch_size=args.patch_size,
                      epochs=args.epochs, lr0=args.lr0, seeds=_parse_seeds(args.seeds), data_seed=args.seed)
    result = run_soft_vs_hard(cfg, ontology)
    checks = directional_checks(result)
    doc = result.to_dict()
    doc.pop("seconds")
    doc["checks"] = checks
    _dump(out / "study.json", doc)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arm", "metric", "mean", "std"])
        for arm, summ in result.summary().items():
            for metric, v in summ.items():
                if isinstance(v, dict):
                    w.writerow([arm, metric, repr(v["mean"]), repr(v["std"])])
    for k, v in checks.items():
        print(f"{k}: {v}")
    return ["study.json", "summary.csv"]


# ------------------------------------------------------------------ parser

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker pool size (env SOFTSEG_THREADS)")
    p.add_argument("--ontology", default=None, help="ontology JSON (default: bundled Gleason ontology)")
    p.add_argument("--level", choices=LEVELS, default=None)
    p.add_argument("--config", default=None, help="JSON file of option defaults; flags win")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="softseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"softseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def leaf(parent, name, func, help_, out_required=True):
        sp = parent.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func, _parser=sp)
        sp.add_argument("--out", required=out_required, default=None)
        return sp

    def nest(name, help_):
        p = sub.add_parser(name, help=help_)
        return p.add_subparsers(dest="sub", required=True)

    onto = nest("ontology", "ontology tools")
    leaf(onto, "validate", cmd_ontology_validate, "load and check an ontology file", out_required=False)

    sp = leaf(sub, "rasterize", cmd_rasterize, "clean and rasterize annotations")
    sp.add_argument("--manifest", required=True)

    fuse = nest("fuse", "fuse annotator masks")
    for method in ("soft", "majority", "staple"):
        sp = leaf(fuse, method, cmd_fuse, f"{method} fusion")
        sp.add_argument("--manifest", required=True)
        sp.set_defaults(method=method)
        if method == "staple":
            sp.add_argument("--tol", type=float, default=1e-6)
            sp.add_argument("--max-iter", type=int, default=100)

    agree = nest("agree", "inter-annotator agreement")
    for what in ("kappa", "heatmap", "pixels", "grade-confusion"):
        sp = leaf(agree, what, cmd_agree, f"{what} statistics")
        sp.add_argument("--manifest", required=True)
        sp.set_defaults(what=what)
        if what == "kappa":
            sp.add_argument("--resamples", type=int, default=10_000)
            sp.add_argument("--by-group", action="store_true")

    sp = leaf(sub, "split", cmd_split, "optimize a train/val/test split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--fractions", type=_parse_fractions, default=DEFAULT_FRACTIONS)
    sp.add_argument("--iters", type=int, default=10_000)
    sp.add_argument("--restarts", type=int, default=1)

    sp = leaf(sub, "train", cmd_train, "train a model")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--loss", choices=LOSS_IDS, default="softdice")
    sp.add_argument("--full-scale", action="store_true", help="start from the full published schedule, not desk scale")
    sp.add_argument("--lr0", type=float, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--patch-size", type=int, default=None)
    sp.add_argument("--weight-decay", type=float, default=None)
    sp.add_argument("--tree-lambda", type=float, default=None)
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--resume", default=None, metavar="CKPT",
                    help="continue from a checkpoint; its config wins except --epochs")

    sp = leaf(sub, "eval", cmd_eval, "evaluate a checkpoint on a split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--subset", choices=("train", "val", "test"), default="test")
    sp.add_argument("--eval-level", choices=LEVELS, default=None)
    sp.add_argument("--window", type=int, default=None)
    sp.add_argument("--overlap", type=float, default=0.5)

    sp = leaf(sub, "infer", cmd_infer, "predict a whole image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--spacing", type=float, default=None)
    sp.add_argument("--window", type=int, default=None)
    sp.add_argument("--overlap", type=float, default=0.5)

    sp = leaf(sub, "render", cmd_render, "overlay a label map on its image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--map", required=True)
    sp.add_argument("--spacing", type=float, default=None)
    sp.add_argument("--alpha", type=float, default=0.5)

    synth = nest("synth", "synthetic data")
    for what in ("scene", "raters"):
        sp = leaf(synth, what, cmd_synth, f"synthetic {what}")
        sp.set_defaults(what=what)
        sp.add_argument("--size", type=int, default=48)
        sp.add_argument("--raters", type=int, default=3)
        sp.add_argument("--jitter", type=int, default=1)
        sp.add_argument("--disagreement", default="sibling", help="sibling | none | blend:<a>")
        if what == "scene":
            sp.add_argument("--index", type=int, default=0)
        else:
            sp.add_argument("--n-images", type=int, default=20)

    repro = nest("repro", "acceptance studies")
    sp = leaf(repro, "soft-vs-hard", cmd_repro, "soft vs hard label study on synthetic data")
    sp.add_argument("--seeds", default="1..3")
    sp.add_argument("--n-images", type=int, default=200)
    sp.add_argument("--size", type=int, default=48)
    sp.add_argument("--patch-size", type=int, default=32)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--lr0", type=float, default=3e-3)

    sp = sub.add_parser("replay", help="re-run a command from its run manifest")
    sp.add_argument("run_manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--check", action="store_true", help="fail unless outputs match byte for byte")
    sp.set_defaults(func=None)
    return parser


# --------------------------------------------------------------- manifests

def _replace_flag(argv: list[str], flag: str, value: str | None) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == flag:
            skip = True
            continue
        if a.startswith(flag + "="):
            continue
        out.append(a)
    return out + [flag, value] if value is not None else out


def _input_hashes(args) -> dict[str, str]:
    hashes = {}
    for name in INPUT_ARGS:
        val = getattr(args, name, None)
        if val and Path(val).is_file():
            hashes[name] = sha256_file(Path(val))
    return hashes


def _write_run_manifest(out: Path, argv: list[str], args, outputs: list[str]) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "_parser")}
    doc = {
        "command": [a for a in argv],
        "config": json.loads(json.dumps(config, default=str)),
        "seeds": {"seed": args.seed},
        "threads": args.threads,
        "inputs": _input_hashes(args),
        "outputs": {name: sha256_file(out / name) for name in sorted(set(outputs))},
        "version": __version__,
    }
    _dump(out / RUN_MANIFEST, doc)


def _replay(args) -> int:
    doc = json.loads(Path(args.run_manifest).read_text())
    argv = _replace_flag(list(doc["command"]), "--out", args.out)
    if args.threads is not None:
        argv = _replace_flag(argv, "--threads", str(args.threads))
    code = main(argv)
    if code != 0 or not args.check:
        return code
    new = json.loads((Path(args.out) / RUN_MANIFEST).read_text())["outputs"]
    bad = sorted(k for k in set(doc["outputs"]) | set(new) if doc["outputs"].get(k) != new.get(k))
    for name in bad:
        print(f"mismatch: {name}", file=sys.stderr)
    print("replay identical" if not bad else f"{len(bad)} output(s) differ")
    return 0 if not bad else 1


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        known = {a.dest for a in args._parser._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise CliError(f"unknown config keys: {unknown}")
        args._parser.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except CliError as exc:
        print(f"softseg: error: {exc}", file=sys.stderr)
        return 2
    if args.func is None:
        return _replay(args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is None:
        args.threads = _default_threads()
    if args.threads < 1:
        print("softseg: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        ontology = load_ontology(args.ontology)
        # BLAS stays single-threaded so numerics never depend on --threads
        with threadpool_limits(limits=1):
            outputs = args.func(args, ontology)
    except (CliError, OntologyError, ValueError, OSError, KeyError, TrainingError) as exc:
        print(f"softseg: error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        _write_run_manifest(Path(args.out), argv, args, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
