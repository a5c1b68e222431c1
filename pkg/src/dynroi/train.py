"""SGD with momentum, validation-selected checkpoints, evaluation and checkpoint IO."""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import engine as E
from . import metrics as M
from .data import AugmentConfig, Sample, augment, derive_rng
from .roi import binarize

log = logging.getLogger(__name__)

MAGIC = b"WROIM1"
VERSION = 1
KIND_BEST, KIND_RESUME = 0, 1


class NonFiniteLoss(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.95
    batch_size: int = 1
    epochs: int = 100
    seed: int = 0
    model: str = "wroim"
    augment: bool = True
    eps: float = 1e-5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ------------------------------------------------------------------ optimizer


def sgd_step(params: Mapping[str, E.Tensor], grads: Mapping[str, np.ndarray | None],
             lr: float, momentum: float, velocity: dict[str, np.ndarray]) -> None:
    """Heavy-ball update in place: v <- momentum*v - lr*g; w <- w + v."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p.data)
        v *= p.dtype.type(momentum)
        v -= p.dtype.type(lr) * g.astype(p.dtype, copy=False)
        p.data += v


# ----------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    config_hash: bytes
    epoch: int
    val_loss: float
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] | None = None

    @classmethod
    def from_model(cls, model, epoch: int = 0, val_loss: float = float("nan"),
                   velocity: Mapping[str, np.ndarray] | None = None) -> "Checkpoint":
        params = {k: p.data.astype("<f4", copy=True) for k, p in model.params.items()}
        vel = None if velocity is None else {k: v.astype("<f4", copy=True) for k, v in velocity.items()}
        return cls(model.config_hash(), epoch, val_loss, params, vel)

    def apply_to(self, model, force: bool = False) -> None:
        if self.config_hash != model.config_hash() and not force:
            raise CheckpointError("checkpoint was written for a different model configuration")
        if set(self.params) != set(model.params):
            raise CheckpointError("checkpoint parameter table does not match the model")
        for name, p in model.params.items():
            arr = self.params[name]
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def _pack_table(table: Mapping[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(table))]
    for name, arr in table.items():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian layout: magic, version, kind, sha256 config hash, epoch,
    val_loss, then (name, shape, float32 data) records; velocities follow for
    resume checkpoints."""
    kind = KIND_RESUME if ckpt.velocity is not None else KIND_BEST
    header = MAGIC + struct.pack("<HB", VERSION, kind) + ckpt.config_hash
    header += struct.pack("<Id", ckpt.epoch, ckpt.val_loss)
    body = _pack_table(ckpt.params)
    if ckpt.velocity is not None:
        body += _pack_table(ckpt.velocity)
    Path(path).write_bytes(header + body)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        table = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode()
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            size = math.prod(shape)
            table[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(shape).copy()
        return table


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, kind = r.unpack("<HB")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if kind not in (KIND_BEST, KIND_RESUME):
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind}")
    config_hash = r.take(32)
    epoch, val_loss = r.unpack("<Id")
    params = r.table()
    velocity = r.table() if kind == KIND_RESUME else None
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return Checkpoint(config_hash, epoch, val_loss, params, velocity)


# -------------------------------------------------------------------- history


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice_disc: float
    val_dice_cup: float
    degenerate_crops: int


HISTORY_HEADER = ("epoch", "train_loss", "val_loss", "val_dice_disc", "val_dice_cup", "degenerate_crops")


@dataclass
class History:
    rows: list[HistoryRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in self.rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_dice_disc),
                        repr(r.val_dice_cup), r.degenerate_crops])
        return buf.getvalue()


# ----------------------------------------------------------------------- loop


def _to_float(t: E.Tensor) -> float:
    return float(t.data)


def validate(model, samples: list[Sample], eps: float = 1e-5) -> tuple[float, float, float]:
    """Mean loss and soft dice (disc, cup) over unaugmented samples."""
    losses, dd, dc = [], [], []
    with E.no_grad():
        for s in samples:
            out = model.forward(s.image)
            losses.append(_to_float(model.loss(out, s.disc, s.cup, eps)))
            dd.append(M.dice(s.disc, out.disc_prob, eps))
            dc.append(M.dice(s.cup, out.cup_prob, eps))
    return float(np.mean(losses)), float(np.mean(dd)), float(np.mean(dc))


def train(model, train_set: list[Sample], val_set: list[Sample], cfg: TrainConfig,
          aug: AugmentConfig | None = None, on_epoch=None) -> tuple[History, Checkpoint]:
    """Serial SGD training; keeps the checkpoint with strictly lowest validation loss."""
    aug = aug or AugmentConfig(seed=cfg.seed)
    velocity: dict[str, np.ndarray] = {}
    history = History()
    best: Checkpoint | None = None
    for epoch in range(1, cfg.epochs + 1):
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(train_set))
        losses = []
        degenerate = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            E.zero_grad(model.params)
            for s in batch:
                if cfg.augment:
                    s = augment(s, aug, derive_rng(aug.seed, "augment", s.id, epoch))
                out = model.forward(s.image)
                loss = model.loss(out, s.disc, s.cup, cfg.eps)
                value = _to_float(loss)
                if not math.isfinite(value):
                    raise NonFiniteLoss(f"non-finite loss {value} on sample {s.id} at epoch {epoch}")
                E.backward(loss)
                loss.tape.release()
                losses.append(value)
                degenerate += int(out.degenerate)
            grads = {k: (p.grad / len(batch) if p.grad is not None else np.zeros_like(p.data))
                     for k, p in model.params.items()}
            sgd_step(model.params, grads, cfg.lr, cfg.momentum, velocity)
        E.zero_grad(model.params)
        val_loss, vd, vc = validate(model, val_set, cfg.eps)
        row = HistoryRow(epoch, float(np.mean(losses)), val_loss, vd, vc, degenerate)
        history.rows.append(row)
        if best is None or val_loss < best.val_loss:
            best = Checkpoint.from_model(model, epoch, val_loss)
        log.info("epoch %d train %.4f val %.4f dice %.3f/%.3f degenerate %d",
                 epoch, row.train_loss, val_loss, vd, vc, degenerate)
        if on_epoch is not None:
            on_epoch(row)
    if best is None:
        raise ValueError("train: epochs must be >= 1")
    return history, best


def evaluate(model, samples: list[Sample], metrics_cfg: M.MetricsConfig | None = None,
             checkpoint: Checkpoint | None = None) -> M.EvalReport:
    """Per-sample Dice/IoU for disc and cup plus CDR, with no augmentation."""
    cfg = metrics_cfg or M.MetricsConfig()
    if checkpoint is not None:
        checkpoint.apply_to(model)
    report = M.EvalReport()
    elapsed = 0.0
    for s in samples:
        t0 = time.perf_counter()
        pred = model.predict(s.image)
        elapsed += time.perf_counter() - t0
        disc_b = binarize(pred.disc_prob, cfg.iou_threshold)
        cup_b = binarize(pred.cup_prob, cfg.iou_threshold)
        try:
            cdr = M.vertical_cdr(pred.disc_mask, pred.cup_mask)
        except ValueError:
            cdr = float("nan")  # no disc predicted: ratio undefined
        report.rows.append(M.EvalRow(
            s.id,
            M.dice(s.disc, pred.disc_prob, cfg.eps), M.iou(s.disc, disc_b),
            M.dice(s.cup, pred.cup_prob, cfg.eps), M.iou(s.cup, cup_b),
            cdr,
            M.dice(s.disc, disc_b, cfg.eps), M.dice(s.cup, cup_b, cfg.eps)))
    if samples:
        report.seconds_per_image = elapsed / len(samples)
    return report
