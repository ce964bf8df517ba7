"""Training loop: Adam on MSE with validation early stopping and resumable checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest
from .errors import ConfigurationWarning, EmptyDataset, NonFiniteGradient, ShapeError
from .neural3d import AdamState, Network, adam_step, load_checkpoint, mse_loss, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    steps_per_epoch: int = 300
    batch_size: int = 3
    lr: float = 1e-4
    early_stop_patience: int = 3
    early_stop_min_delta: float = 1e-4
    seed: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        for name in ("max_epochs", "steps_per_epoch", "batch_size", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.early_stop_min_delta < 1:
            raise ValueError("early_stop_min_delta must be in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass
class TrainLog:
    steps: list[tuple[int, int, float, float]] = field(default_factory=list)  # step, epoch, loss, wall_ms
    val: list[tuple[int, int, float, float]] = field(default_factory=list)  # step, epoch, loss, wall_ms
    stop_reason: str | None = None
    best_epoch: int | None = None
    best_val: float = math.inf

    def to_state(self) -> dict:
        """Checkpoint form. Wall times are dropped so checkpoints stay bit-reproducible."""
        return {"steps": [r[:3] for r in self.steps], "val": [r[:3] for r in self.val],
                "stop_reason": self.stop_reason,
                "best_epoch": self.best_epoch, "best_val": None if math.isinf(self.best_val) else self.best_val}

    @classmethod
    def from_state(cls, d: dict) -> "TrainLog":
        best = d.get("best_val")
        nan = float("nan")
        return cls([(*r[:3], nan) for r in d["steps"]], [(*r[:3], nan) for r in d["val"]], d.get("stop_reason"),
                   d.get("best_epoch"), math.inf if best is None else best)

    def write_csv(self, path) -> None:
        rows = [(s, e, "train", loss, w) for s, e, loss, w in self.steps]
        rows += [(s, e, "val", loss, w) for s, e, loss, w in self.val]
        rows.sort(key=lambda r: (r[0], r[2] == "val"))
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "epoch", "split", "loss", "wall_ms"])
            for s, e, split, loss, wall in rows:
                # wall time is unknown for rows restored from a checkpoint
                w.writerow([s, e, split, repr(float(loss)), "" if math.isnan(wall) else f"{wall:.1f}"])


def evaluate_validation(net: Network, manifest: DatasetManifest, split: str = "val") -> float:
    """Mean eval-mode MSE over every cube of ``split``."""
    idxs = manifest.indices(split)
    if not idxs:
        raise EmptyDataset(f"{split} split is empty")
    losses = []
    for i in idxs:
        x, y = manifest.batch([i])
        losses.append(mse_loss(net.forward(x, train=False), y)[0])
    return float(np.mean(losses))


def _improved(val: float, best: float, min_delta: float) -> bool:
    return math.isinf(best) or val < best * (1.0 - min_delta)


def train(manifest: DatasetManifest, net: Network, cfg: TrainConfig, resume=None,
          on_epoch=None) -> tuple[Network, TrainLog]:
    """Optimize ``net`` on the train split.

    ``resume`` may name a ``.dnet`` written by a previous call; network,
    optimizer, RNG and early-stopping state are restored from it so that a
    split run reproduces an uninterrupted one.
    """
    train_idx = manifest.indices("train")
    if not train_idx:
        raise EmptyDataset("train split is empty")
    val_split = "val"
    if not manifest.indices("val"):
        warnings.warn("val split is empty; validating on the train split", ConfigurationWarning, stacklevel=2)
        val_split = "train"
    if tuple(net.config.input_dims) != tuple(manifest.cube_dims):
        raise ShapeError(f"network input {net.config.input_dims} != cube dims {manifest.cube_dims}")

    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(lr=cfg.lr)
    tlog = TrainLog()
    start_epoch, bad_epochs = 0, 0
    if resume is not None:
        net, adam, header = load_checkpoint(resume)
        adam.lr = cfg.lr
        rng.bit_generator.state = header["rng_state"]
        state = header["extra"]["trainer"]
        tlog = TrainLog.from_state(state["log"])
        start_epoch, bad_epochs = state["epoch"] + 1, state["bad_epochs"]
        tlog.stop_reason = None
    net.train()
    step = start_epoch * cfg.steps_per_epoch

    def checkpoint(path, epoch):
        extra = {"trainer": {"epoch": epoch, "bad_epochs": bad_epochs, "log": tlog.to_state()}}
        save_checkpoint(path, net, adam, rng.bit_generator.state, cfg.seed, extra)

    for epoch in range(start_epoch, cfg.max_epochs):
        t0 = time.perf_counter()
        for _ in range(cfg.steps_per_epoch):
            ts = time.perf_counter()
            x, y = manifest.batch(rng.choice(train_idx, size=cfg.batch_size, replace=True))
            loss, grad = mse_loss(net.forward(x, train=True), y)
            grads, _ = net.backward(grad)
            try:
                adam_step(net.parameters(), grads, adam)
            except NonFiniteGradient:
                tlog.stop_reason = "error"
                log.error("non-finite gradient at step %d", step)
                raise
            step += 1
            tlog.steps.append((step, epoch, loss, 1e3 * (time.perf_counter() - ts)))
        net.eval()
        val = evaluate_validation(net, manifest, val_split)
        net.train()
        tlog.val.append((step, epoch, val, 1e3 * (time.perf_counter() - t0)))
        log.info("epoch %d: train %.6g, val %.6g", epoch, tlog.steps[-1][2], val)
        if _improved(val, tlog.best_val, cfg.early_stop_min_delta):
            tlog.best_val, tlog.best_epoch, bad_epochs = val, epoch, 0
            if ckpt_dir is not None:
                checkpoint(ckpt_dir / "best.dnet", epoch)
        else:
            bad_epochs += 1
        if bad_epochs >= cfg.early_stop_patience:
            tlog.stop_reason = "early_stop"
        elif epoch == cfg.max_epochs - 1:
            tlog.stop_reason = "max_epochs"
        if ckpt_dir is not None:
            checkpoint(ckpt_dir / "last.dnet", epoch)
            tlog.write_csv(ckpt_dir / "train_log.csv")
        if on_epoch is not None:
            on_epoch(epoch, net, tlog)
        if tlog.stop_reason == "early_stop":
            break
    if tlog.stop_reason is None:
        tlog.stop_reason = "max_epochs"
    return net.eval(), tlog
