"""A small U-Net in plain numpy with hand-written backpropagation.

Architecture (all 3x3 convolutions zero-padded, ReLU after each)::

    enc1: 3 -> 16 -> 16 ──────────────────────────┐ skip
    maxpool 2x2                                   │
    enc2: 16 -> 32 -> 32                          │
    nearest x2 upsample, concat with skip (48) <──┘
    dec:  48 -> 16 -> 16
    head: 1x1, 16 -> C

Public tensors are NCHW; activations are kept NHWC internally so every
convolution is a single im2col matrix product.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fusion import SoftLabelMap, majority_vote
from .imaging import augment_light, central_patch, sample_patch
from .objectives import Targets, compute_loss, softmax
from .ontology import Ontology

log = logging.getLogger(__name__)

LAYERS = (
    ("enc1a", 3, 16, 3),
    ("enc1b", 16, 16, 3),
    ("enc2a", 16, 32, 3),
    ("enc2b", 32, 32, 3),
    ("dec_a", 48, 16, 3),
    ("dec_b", 16, 16, 3),
)


class TrainingError(RuntimeError):
    pass


@dataclass
class MiniUNet:
    params: dict[str, np.ndarray]
    n_classes: int

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "MiniUNet":
        return MiniUNet({k: v.copy() for k, v in self.params.items()}, self.n_classes)


def layer_shapes(n_classes: int) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for name, cin, cout, k in LAYERS:
        shapes += [(f"{name}.w", (cout, cin, k, k)), (f"{name}.b", (cout,))]
    shapes += [("head.w", (n_classes, 16, 1, 1)), ("head.b", (n_classes,))]
    return shapes


def init_model(n_classes: int, seed: int = 0, dtype=np.float32) -> MiniUNet:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_shapes(n_classes):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, shape).astype(dtype)
    return MiniUNet(params, n_classes)


# ------------------------------------------------------------ primitives

def _conv3(x, w, b):
    n, h, wd, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(n * h * wd, cin * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, -1), cols


def _conv3_back(dout, cols, w, x_shape):
    n, h, wd, cin = x_shape
    d2 = dout.reshape(-1, w.shape[0])
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(w.shape[0], -1)).reshape(n, h, wd, cin, 3, 3)
    dxp = np.zeros((n, h + 2, wd + 2, cin), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += dcols[..., i, j]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool(x):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def _pool_back(dout, idx, x_shape):
    n, h, w, c = x_shape
    blocks = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x_shape)


def _up(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_back(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# ------------------------------------------------------ forward/backward

@dataclass
class ForwardCache:
    input_shape: tuple[int, ...]
    cols: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)
    relu: dict = field(default_factory=dict)
    pool_idx: np.ndarray | None = None
    head_in: np.ndarray | None = None


def forward(model: MiniUNet, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """``N x 3 x H x W`` images -> ``N x C x H x W`` logits and a cache for :func:`backward`."""
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected N x 3 x H x W input, got {batch.shape}")
    if batch.shape[2] % 2 or batch.shape[3] % 2:
        raise ValueError(f"spatial dims must be even, got {batch.shape[2:]}")
    p = model.params
    cache = ForwardCache(batch.shape)
    x = np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=model.dtype)

    def conv_relu(name, x):
        cache.shapes[name] = x.shape
        out, cache.cols[name] = _conv3(x, p[f"{name}.w"], p[f"{name}.b"])
        out = np.maximum(out, 0)
        cache.relu[name] = out > 0
        return out

    skip = conv_relu("enc1b", conv_relu("enc1a", x))
    pooled, cache.pool_idx = _pool(skip)
    deep = conv_relu("enc2b", conv_relu("enc2a", pooled))
    cat = np.concatenate([skip, _up(deep)], axis=-1)
    feat = conv_relu("dec_b", conv_relu("dec_a", cat))
    cache.head_in = feat
    n, h, w, _ = feat.shape
    logits = feat.reshape(-1, 16) @ p["head.w"].reshape(model.n_classes, 16).T + p["head.b"]
    return logits.reshape(n, h, w, -1).transpose(0, 3, 1, 2), cache


def backward(model: MiniUNet, cache: ForwardCache, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients for upstream ``dL/dlogits`` (``N x C x H x W``)."""
    n, _, h, w = cache.input_shape
    if grad_logits.shape != (n, model.n_classes, h, w):
        raise ValueError(f"gradient shape {grad_logits.shape} does not match cached batch {(n, model.n_classes, h, w)}")
    p = model.params
    grads: dict[str, np.ndarray] = {}
    g = np.ascontiguousarray(grad_logits.transpose(0, 2, 3, 1), dtype=model.dtype).reshape(-1, model.n_classes)
    feat = cache.head_in.reshape(-1, 16)
    grads["head.w"] = (g.T @ feat).reshape(p["head.w"].shape)
    grads["head.b"] = g.sum(axis=0)
    d = (g @ p["head.w"].reshape(model.n_classes, 16)).reshape(n, h, w, 16)

    def conv_relu_back(name, d):
        d = d * cache.relu[name]
        dx, grads[f"{name}.w"], grads[f"{name}.b"] = _conv3_back(d, cache.cols[name], p[f"{name}.w"],
                                                                 cache.shapes[name])
        return dx

    d = conv_relu_back("dec_a", conv_relu_back("dec_b", d))
    d_skip, d_up = d[..., :16], d[..., 16:]
    d_deep = conv_relu_back("enc2a", conv_relu_back("enc2b", _up_back(d_up)))
    d_skip = d_skip + _pool_back(d_deep, cache.pool_idx, cache.shapes["enc2a"][:1] + (h, w, 16))
    conv_relu_back("enc1a", conv_relu_back("enc1b", d_skip))
    return {k: grads[k] for k, _ in layer_shapes(model.n_classes)}


def predict_proba(model: MiniUNet, batch: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, batch)
    return softmax(logits.astype(np.float64), axis=1)


# ------------------------------------------------------------- optimizer

@dataclass
class TrainerConfig:
    lr0: float = 5e-5
    lr_factor: float = 1.0 / 3.0
    patience: int = 2
    weight_decay: float = 0.02
    batch_size: int = 12
    epochs: int = 200
    beta1: float = 0.99
    beta2: float = 0.9
    adam_eps: float = 1e-8
    min_lr: float = 1e-7
    seed: int = 0
    loss: str = "softdice"
    level: str = "explanation"
    patch_size: int = 512
    tree_lambda: float = 0.5
    augment: bool = True

    def __post_init__(self):
        for name in ("lr0", "lr_factor", "batch_size", "epochs", "adam_eps", "min_lr", "patch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainerConfig":
        """Small-patch, short-schedule variant used by tests and demos."""
        base = dict(patch_size=64, epochs=30)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               lr: float, beta1: float, beta2: float, eps: float, weight_decay: float) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k, theta in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * theta
        theta -= (lr * update).astype(theta.dtype)


@dataclass
class PlateauScheduler:
    """Divide the learning rate after ``patience`` epochs without a strict improvement."""

    lr: float
    factor: float = 1.0 / 3.0
    patience: int = 2
    min_lr: float = 1e-7
    best: float = math.inf
    counter: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.counter = 0
        return self.lr


def plateau_schedule(val_losses: Sequence[float], lr0: float = 5e-5, factor: float = 1.0 / 3.0,
                     patience: int = 2, min_lr: float = 1e-7) -> list[float]:
    """Learning rate in effect after each epoch of ``val_losses``."""
    sched = PlateauScheduler(lr0, factor, patience, min_lr)
    return [sched.step(v) for v in val_losses]


# ------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"MUN1"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    epoch: int
    params: dict[str, np.ndarray]
    adam: AdamState
    val_loss: float
    config: dict
    scheduler: dict
    n_classes: int
    format_version: int = CKPT_VERSION

    @property
    def config_hash(self) -> str:
        return TrainerConfig.from_dict(self.config).config_hash()

    def model(self) -> MiniUNet:
        return MiniUNet({k: v.copy() for k, v in self.params.items()}, self.n_classes)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Binary checkpoint: magic, config hash, JSON metadata, then named f32 tensors."""
    meta = json.dumps({
        "format_version": ckpt.format_version, "epoch": ckpt.epoch, "val_loss": ckpt.val_loss,
        "adam_t": ckpt.adam.t, "config": ckpt.config, "scheduler": ckpt.scheduler,
        "n_classes": ckpt.n_classes,
    }, sort_keys=True).encode()
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"adam_m/{k}", v) for k, v in ckpt.adam.m.items()]
    tensors += [(f"adam_v/{k}", v) for k, v in ckpt.adam.v.items()]
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(ckpt.config_hash.encode("ascii"))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a MUN1 checkpoint")
    stored_hash = data[4:68].decode("ascii")
    off = 68
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        arr = np.frombuffer(data, "<f4", size, off).reshape(shape).astype(np.float32)
        off += 4 * size
        kind, key = name.split("/", 1)
        groups[kind][key] = arr
    ckpt = Checkpoint(meta["epoch"], groups["param"], AdamState(groups["adam_m"], groups["adam_v"], meta["adam_t"]),
                      meta["val_loss"], meta["config"], meta["scheduler"], meta["n_classes"], meta["format_version"])
    if ckpt.config_hash != stored_hash:
        raise ValueError(f"{path}: config hash mismatch")
    return ckpt


# --------------------------------------------------------------- training

@dataclass
class TrainSample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    labels: SoftLabelMap


@dataclass
class TrainResult:
    best: Checkpoint
    log: list[dict]
    final_model: MiniUNet


def make_targets(label_patches: Sequence[SoftLabelMap], dtype=np.float32) -> Targets:
    soft = np.stack([lp.probs.reshape(-1, lp.n_classes).T for lp in label_patches]).astype(dtype)
    hard = np.stack([majority_vote(lp).labels.ravel() for lp in label_patches])
    fg = np.stack([lp.foreground.ravel() for lp in label_patches])
    return Targets(soft, hard, fg)


def to_nchw(images: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(im).transpose(2, 0, 1) for im in images])


def _batch_loss(model, config, ontology, images, labels, need_grad):
    logits, cache = forward(model, to_nchw(images))
    n, c, h, w = logits.shape
    targets = make_targets(labels, model.dtype)
    try:
        res = compute_loss(config.loss, logits.reshape(n, c, h * w), targets, ontology, config.level,
                           config.tree_lambda)
    except ValueError as exc:
        if "empty count mask" in str(exc):
            return None, None
        raise
    if not math.isfinite(res.value):
        raise TrainingError(f"non-finite {config.loss} loss ({res.value}); lr may be too high "
                            f"or inputs contain NaN")
    grads = backward(model, cache, res.grad_logits.reshape(n, c, h, w)) if need_grad else None
    return res.value, grads


def validation_loss(model: MiniUNet, config: TrainerConfig, ontology: Ontology,
                    val: Sequence[TrainSample]) -> float:
    """Mean loss over central patches, batched like training; batches without countable pixels are skipped."""
    patches = [central_patch(s.image, config.patch_size, s.labels) for s in val]
    values = []
    for i in range(0, len(patches), config.batch_size):
        chunk = patches[i:i + config.batch_size]
        v, _ = _batch_loss(model, config, ontology, [p for p, _ in chunk], [l for _, l in chunk], False)
        if v is not None:
            values.append(v)
    if not values:
        raise TrainingError("validation split has no pixels the loss can count")
    return float(np.mean(values))


def train(config: TrainerConfig, train_set: Sequence[TrainSample], val_set: Sequence[TrainSample],
          ontology: Ontology, n_classes: int | None = None, out_dir: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None, model: MiniUNet | None = None,
          resume: Checkpoint | None = None) -> TrainResult:
    """Train with random foreground patches; keep the epoch with the lowest validation loss.

    ``resume`` continues from a checkpoint (weights, moments, schedule) at
    the following epoch; the result matches an uninterrupted run.  Only
    ``epochs`` may differ from the checkpoint's config.
    """
    if not train_set or not val_set:
        raise TrainingError("train and validation splits must be non-empty")
    n_classes = n_classes or train_set[0].labels.n_classes
    sched = PlateauScheduler(config.lr0, config.lr_factor, config.patience, config.min_lr)
    best: Checkpoint | None = None
    first = 1
    if resume is not None:
        saved = {k: v for k, v in resume.config.items() if k != "epochs"}
        if saved != {k: v for k, v in config.to_dict().items() if k != "epochs"}:
            raise TrainingError("checkpoint was written with a different training config")
        if resume.epoch >= config.epochs:
            raise TrainingError(f"checkpoint is at epoch {resume.epoch}, nothing left of {config.epochs}")
        model = resume.model()
        adam = AdamState({k: v.copy() for k, v in resume.adam.m.items()},
                         {k: v.copy() for k, v in resume.adam.v.items()}, resume.adam.t)
        sched.lr, sched.best, sched.counter = (resume.scheduler["lr"], resume.scheduler["best"],
                                               resume.scheduler["counter"])
        if resume.val_loss <= sched.best:
            best = resume
        first = resume.epoch + 1
    else:
        model = model or init_model(n_classes, config.seed)
        adam = AdamState.zeros_like(model.params)
    out_dir = Path(out_dir) if out_dir is not None else None
    history: list[dict] = []
    for epoch in range(first, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_set))
        lr = sched.lr
        losses, skipped = [], 0
        for start in range(0, len(order), config.batch_size):
            images, labels = [], []
            for i in order[start:start + config.batch_size]:
                s = train_set[i]
                patch, lab = sample_patch(s.image, s.labels, config.patch_size, rng)
                if config.augment:
                    patch, lab = augment_light(patch, lab, rng)
                images.append(patch)
                labels.append(lab)
            value, grads = _batch_loss(model, config, ontology, images, labels, True)
            if value is None:
                skipped += 1
                continue
            adamw_step(model.params, grads, adam, lr, config.beta1, config.beta2, config.adam_eps,
                       config.weight_decay)
            losses.append(value)
        val = validation_loss(model, config, ontology, val_set)
        new_lr = sched.step(val)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
                 "val_loss": val, "lr": lr, "skipped_batches": skipped}
        history.append(entry)
        log.info("epoch %d train %.5f val %.5f lr %.3g", epoch, entry["train_loss"] or float("nan"), val, lr)
        ckpt = Checkpoint(epoch, {k: v.copy() for k, v in model.params.items()},
                          AdamState({k: v.copy() for k, v in adam.m.items()},
                                    {k: v.copy() for k, v in adam.v.items()}, adam.t),
                          val, config.to_dict(), {"lr": new_lr, "best": sched.best, "counter": sched.counter},
                          n_classes)
        if best is None or val < best.val_loss:
            best = ckpt
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out_dir / f"epoch_{epoch:03d}.mun", ckpt)
            with open(out_dir / "train_log.jsonl", "a" if epoch > first or resume else "w") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        if on_epoch is not None:
            on_epoch(entry)
    best = best or resume
    if out_dir is not None and best is not None:
        save_checkpoint(out_dir / "best.mun", best)
    return TrainResult(best, history, model)


def select_best_epoch(history: Sequence[dict]) -> int:
    """Epoch number with the lowest validation loss (earliest on ties)."""
    return min(history, key=lambda e: (e["val_loss"], e["epoch"]))["epoch"]
