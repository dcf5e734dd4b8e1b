"""Optimizers, learning-rate schedules, training/evaluation loops and checkpoints."""

from __future__ import annotations

import copy
import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .arch import CompGraph, forward
from .data import AugmentPolicy, Dataset, augment_batch, confusion, metrics_from_confusion
from .errors import CheckpointError, ConfigError, NumericError
from .tensor import Tensor, backward, no_grad

OPTIMIZERS = ("adam", "sgd_momentum")
SCHEDULES = ("constant", "step_decay", "per_epoch_decay", "plateau")


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer kind must be one of {OPTIMIZERS}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        self.betas = tuple(self.betas)


class Optimizer:
    """Adam (bias-corrected) or SGD with momentum over a fixed parameter list.

    Weight decay is added to the gradient (L2). Parameters without a gradient
    are skipped but keep their buffers.
    """

    def __init__(self, params: Sequence[Tensor], cfg: OptimConfig | None = None):
        self.params = list(params)
        self.cfg = cfg or OptimConfig()
        self.lr = self.cfg.lr
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params] if self.cfg.kind == "adam" else []

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list:
        grads = [p.grad for p in self.params]
        for i, g in enumerate(grads):
            if g is not None and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {i} ({self.params[i].name or 'unnamed'})")
        clip = self.cfg.grad_clip
        if clip:
            norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))
            if norm > clip:
                grads = [None if g is None else g * (clip / norm) for g in grads]
        return grads

    def step(self) -> None:
        c = self.cfg
        grads = self._grads()
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            if c.weight_decay:
                g = g + c.weight_decay * p.data
            if c.kind == "adam":
                b1, b2 = c.betas
                self.m[i] = b1 * self.m[i] + (1 - b1) * g
                self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
                m_hat = self.m[i] / (1 - b1 ** self.t)
                v_hat = self.v[i] / (1 - b2 ** self.t)
                p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + c.eps)).astype(p.data.dtype)
            else:
                self.m[i] = c.momentum * self.m[i] + g
                p.data = (p.data - self.lr * self.m[i]).astype(p.data.dtype)

    def state_arrays(self) -> list[np.ndarray]:
        return self.m + self.v

    def load_state_arrays(self, arrays: Sequence[np.ndarray], t: int, lr: float) -> None:
        n = len(self.params)
        if len(arrays) != len(self.m) + len(self.v):
            raise CheckpointError("optimizer state does not match parameter list")
        for i, a in enumerate(arrays):
            ref = self.m[i] if i < n else self.v[i - n]
            if a.shape != ref.shape:
                raise CheckpointError("optimizer buffer shape mismatch")
        self.m = [np.array(a) for a in arrays[:n]]
        self.v = [np.array(a) for a in arrays[n:]]
        self.t, self.lr = t, lr


@dataclass
class ScheduleConfig:
    kind: str = "constant"
    lr0: float | None = None  # None: take the optimizer's lr
    factor: float = 0.1
    every: int = 10
    rate: float = 0.003
    patience: int = 5
    threshold: float = 1e-4
    min_lr: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigError(f"schedule kind must be one of {SCHEDULES}")
        if self.lr0 is not None and self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.kind == "step_decay" and (self.every < 1 or not 0 < self.factor <= 1):
            raise ConfigError("step_decay needs every >= 1 and 0 < factor <= 1")
        if self.kind == "per_epoch_decay" and not 0 <= self.rate < 1:
            raise ConfigError("per_epoch_decay needs 0 <= rate < 1")
        if self.kind == "plateau" and (self.patience < 0 or not 0 < self.factor <= 1):
            raise ConfigError("plateau needs patience >= 0 and 0 < factor <= 1")


def schedule(cfg: ScheduleConfig, epoch: int, history: Sequence[float] = ()) -> float:
    """Learning rate for ``epoch`` (0-based).

    ``history`` holds the monitored metric (lower is better) of the epochs
    before ``epoch``; only the plateau rule reads it.
    """
    if cfg.lr0 is None:
        raise ConfigError("schedule needs lr0; train() fills it from the optimizer config")
    if cfg.kind == "constant":
        return cfg.lr0
    if cfg.kind == "step_decay":
        return cfg.lr0 * cfg.factor ** (epoch // cfg.every)
    if cfg.kind == "per_epoch_decay":
        return cfg.lr0 * (1 - cfg.rate) ** epoch
    lr, best, bad = cfg.lr0, np.inf, 0
    for m in list(history)[:epoch]:
        if m < best - cfg.threshold:
            best, bad = m, 0
        else:
            bad += 1
            if bad > cfg.patience:
                lr, bad = max(lr * cfg.factor, cfg.min_lr), 0
    return lr


# -- loops --------------------------------------------------------------------

def graph_dtype(g: CompGraph):
    return next(iter(g.convs.values())).weight.dtype


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def predict(g: CompGraph, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    dtype = graph_dtype(g)
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = forward(g, Tensor(images[i:i + batch_size].astype(dtype)), training=False)
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], np.int64)


def evaluate(g: CompGraph, ds: Dataset, batch_size: int = 16) -> dict:
    """Metrics over the whole split (confusion counts pooled), BN in eval mode."""
    cm = np.zeros((ds.num_classes, ds.num_classes), np.int64)
    for i in range(0, len(ds), batch_size):
        pred = predict(g, ds.images[i:i + batch_size], batch_size)
        cm += confusion(pred, ds.masks[i:i + batch_size], ds.num_classes)
    return metrics_from_confusion(cm)


def recalibrate_bn(g: CompGraph, ds: Dataset, n_batches: int = 4, batch_size: int = 8,
                   run: Callable | None = None) -> None:
    """Re-estimate running statistics with cumulative averaging over a few training batches."""
    saved = {k: b.momentum for k, b in g.norms.items()}
    for b in g.norms.values():
        b.reset_running_stats()
        b.momentum = None
    dtype = graph_dtype(g)
    try:
        with no_grad():
            for i, idx in enumerate(batches(len(ds), batch_size, None)):
                if i >= n_batches:
                    break
                x = Tensor(ds.images[idx].astype(dtype))
                (run or (lambda t: forward(g, t, training=True)))(x)
    finally:
        for k, b in g.norms.items():
            b.momentum = saved[k]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)
    sched: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: AugmentPolicy | None = None
    eval_every: int = 1
    stop_at: float | None = None  # end early once val mIoU reaches this


@dataclass
class TrainResult:
    graph: CompGraph
    optimizer: Optimizer
    history: list[dict]
    best_epoch: int | None = None
    best_mIoU: float = -1.0
    best_state: dict | None = None

    def restore_best(self) -> None:
        if self.best_state is not None:
            load_state(self.graph, self.best_state)


def snapshot(g: CompGraph) -> dict:
    """Copy of every parameter array and batch-norm running statistic."""
    return {
        "params": [p.data.copy() for p in g.parameters(include_selection=True)],
        "bn": {k: (b.running_mean.copy(), b.running_var.copy(), b.batches_tracked)
               for k, b in g.norms.items()},
    }


def load_state(g: CompGraph, state: dict) -> None:
    for p, a in zip(g.parameters(include_selection=True), state["params"]):
        p.data = a.copy()
    for k, (m, v, n) in state["bn"].items():
        b = g.norms[k]
        b.running_mean, b.running_var, b.batches_tracked = m.copy(), v.copy(), n


def train_step(g: CompGraph, opt: Optimizer, images: np.ndarray, masks: np.ndarray) -> float:
    x = Tensor(images.astype(graph_dtype(g)))
    logits = forward(g, x, training=True)
    loss = nn.softmax_cross_entropy(logits, masks)
    opt.zero_grad()
    backward(loss)
    opt.step()
    return loss.item()


def train(g: CompGraph, train_ds: Dataset, val_ds: Dataset | None, cfg: TrainConfig,
          resume: "CheckpointInfo | None" = None, optimizer: Optimizer | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Mini-batch training with per-epoch validation and best-state tracking.

    The shuffle and augmentation streams of epoch ``e`` depend only on
    ``(seed, e)``, so a run resumed from a checkpoint replays the same batches
    as an unbroken one.
    """
    opt = optimizer or Optimizer(g.parameters(), cfg.optim)
    sched = cfg.sched if cfg.sched.lr0 is not None else replace(cfg.sched, lr0=cfg.optim.lr)
    history: list[dict] = list(resume.history) if resume else []
    start = resume.epoch if resume else 0
    result = TrainResult(g, opt, history)
    for row in history:
        if row.get("val_mIoU") is not None and row["val_mIoU"] > result.best_mIoU:
            result.best_mIoU, result.best_epoch = row["val_mIoU"], row["epoch"]
    for epoch in range(start, cfg.epochs):
        opt.lr = schedule(sched, epoch, [h["train_loss"] for h in history])
        rng = np.random.default_rng([cfg.seed, epoch])
        losses, weights = [], []
        for idx in batches(len(train_ds), cfg.batch_size, rng):
            imgs, msks = augment_batch(train_ds.images[idx], train_ds.masks[idx], cfg.augment, rng)
            try:
                loss = train_step(g, opt, imgs, msks)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from exc
            losses.append(loss)
            weights.append(len(idx))
        if not losses:
            raise ConfigError("training split is empty")
        row = {"epoch": epoch, "train_loss": float(np.average(losses, weights=weights)), "lr": opt.lr,
               "val_mIoU": None, "val_DICE": None}
        if val_ds is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            m = evaluate(g, val_ds)
            row["val_mIoU"], row["val_DICE"] = m["mIoU"], m["DICE"]
            if m["mIoU"] > result.best_mIoU:
                result.best_mIoU, result.best_epoch = m["mIoU"], epoch
                result.best_state = snapshot(g)
        history.append(row)
        if on_epoch:
            on_epoch(row)
        if cfg.stop_at is not None and row["val_mIoU"] is not None and row["val_mIoU"] >= cfg.stop_at:
            break
    return result


def write_history_csv(history: Sequence[dict], path) -> Path:
    path = Path(path)
    cols = ["epoch", "train_loss", "lr", "val_mIoU", "val_DICE"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow(["" if row.get(c) is None else repr(row[c]) for c in cols])
    return path


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"BXCKPT\x00\x01"
CKPT_VERSION = 1


@dataclass
class CheckpointInfo:
    epoch: int
    history: list
    extra: dict


def save_checkpoint(path, g: CompGraph, optimizer: Optimizer | None = None, epoch: int = 0,
                    history: Sequence[dict] = (), extra: dict | None = None) -> Path:
    """Binary checkpoint: magic, version, JSON header length, JSON header, raw arrays."""
    arrays = [p.data for p in g.parameters(include_selection=True)]
    for k in sorted(g.norms, key=repr):
        b = g.norms[k]
        arrays += [b.running_mean, b.running_var]
    n_model = len(arrays)
    if optimizer is not None:
        arrays += optimizer.state_arrays()
    header = {
        "version": CKPT_VERSION,
        "signature": g.structure_signature(),
        "epoch": epoch,
        "history": list(history),
        "extra": extra or {},
        "bn_tracked": [g.norms[k].batches_tracked for k in sorted(g.norms, key=repr)],
        "n_model_arrays": n_model,
        "optimizer": None if optimizer is None else {
            "kind": optimizer.cfg.kind, "t": optimizer.t, "lr": optimizer.lr,
            "config": asdict(optimizer.cfg)},
        "arrays": [{"shape": list(a.shape), "dtype": a.dtype.str} for a in arrays],
    }
    blob = json.dumps(header).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())
    return path


def load_checkpoint(path, g: CompGraph, optimizer: Optimizer | None = None) -> CheckpointInfo:
    """Restore parameters, BN statistics and optionally optimizer state into ``g``."""
    raw = Path(path).read_bytes()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    off = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, off)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    try:
        header = json.loads(raw[off:off + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    off += hlen
    if header["signature"] != json.loads(json.dumps(g.structure_signature())):
        raise CheckpointError("checkpoint was saved from a different network structure")
    arrays = []
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"]))
        if off + count * dt.itemsize > len(raw):
            raise CheckpointError("checkpoint truncated")
        arrays.append(np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(spec["shape"]).copy())
        off += count * dt.itemsize
    params = g.parameters(include_selection=True)
    for p, a in zip(params, arrays):
        p.data = a
    idx = len(params)
    for k, tracked in zip(sorted(g.norms, key=repr), header["bn_tracked"]):
        b = g.norms[k]
        b.running_mean, b.running_var = arrays[idx], arrays[idx + 1]
        b.batches_tracked = tracked
        idx += 2
    if optimizer is not None:
        ost = header["optimizer"]
        if ost is None or ost["kind"] != optimizer.cfg.kind:
            raise CheckpointError("checkpoint holds no matching optimizer state")
        optimizer.load_state_arrays(arrays[header["n_model_arrays"]:], ost["t"], ost["lr"])
    return CheckpointInfo(header["epoch"], header["history"], header["extra"])


def clone_graph(g: CompGraph) -> CompGraph:
    return copy.deepcopy(g)
