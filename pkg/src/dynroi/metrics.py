"""Overlap metrics, log-dice losses and the vertical cup-to-disc ratio."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .roi import as_mask

LOSS_FLOOR = 1e-7
HEADER = ("id", "dice_disc", "iou_disc", "dice_cup", "iou_cup", "cdr")


@dataclass(frozen=True)
class MetricsConfig:
    eps: float = 1e-5
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def _plane(a) -> np.ndarray:
    arr = np.asarray(getattr(a, "data", a), dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    return arr


def dice(X, Y, eps: float = 1e-5) -> float:
    """2 sum(xy) / (eps + sum(x^2) + sum(y^2)) with squared denominator terms."""
    x, y = _plane(X), _plane(Y)
    if x.shape != y.shape:
        raise ValueError(f"dice: shape mismatch {x.shape} vs {y.shape}")
    return float(2.0 * (x * y).sum() / (eps + (x * x).sum() + (y * y).sum()))


def dice_tensor(X, Y: E.Tensor, eps: float = 1e-5) -> E.Tensor:
    """Differentiable dice of a constant target ``X`` against prediction ``Y``."""
    x = np.asarray(X, dtype=Y.dtype).reshape(Y.shape)
    xt = E.Tensor(x)
    inter = E.sum_(E.mul(Y, xt))
    denom = E.add(E.sum_(E.mul(Y, Y)), float(eps + (x * x).sum()))
    return E.div(E.scale(inter, 2.0), denom)


def log_dice_loss(X, Y, eps: float = 1e-5, floor: float = LOSS_FLOOR):
    """-log(max(dice, floor)); a Tensor when ``Y`` is a Tensor, else a float."""
    if isinstance(Y, E.Tensor):
        d = dice_tensor(X, Y, eps)
        return E.scale(E.log(E.clamp_min(d, floor)), -1.0)
    return -math.log(max(dice(X, Y, eps), floor))


def check_partition(gt3) -> None:
    stack = np.stack([as_mask(g) for g in gt3]).astype(np.int64)
    if stack.shape[0] != 3:
        raise ValueError("expected three ground-truth channels")
    if not (stack.sum(axis=0) == 1).all():
        raise ValueError("ground-truth channels do not partition the frame")


def multi_channel_loss(gt3, pred3, eps: float = 1e-5, floor: float = LOSS_FLOOR):
    """Mean of the per-channel log-dice losses over (background, cup, rim)."""
    check_partition(gt3)
    if isinstance(pred3, E.Tensor):
        terms = [log_dice_loss(gt3[i], E.channel(pred3, i), eps, floor) for i in range(3)]
        return E.scale(E.add(E.add(terms[0], terms[1]), terms[2]), 1.0 / 3.0)
    p = np.asarray(pred3)
    return sum(log_dice_loss(gt3[i], p[i], eps, floor) for i in range(3)) / 3.0


def iou(X, Yb) -> float:
    x, y = as_mask(X).astype(bool), as_mask(Yb).astype(bool)
    if x.shape != y.shape:
        raise ValueError(f"iou: shape mismatch {x.shape} vs {y.shape}")
    union = int((x | y).sum())
    if union == 0:
        return 1.0
    return int((x & y).sum()) / union


def masks_from_channels(pred3) -> tuple[np.ndarray, np.ndarray]:
    """Argmax over (background, cup, rim); disc is cup union rim."""
    label = np.asarray(getattr(pred3, "data", pred3)).argmax(axis=0)
    cup = (label == 1).astype(np.uint8)
    disc = ((label == 1) | (label == 2)).astype(np.uint8)
    return disc, cup


def _row_span(mask: np.ndarray) -> int:
    rows = np.flatnonzero(mask.any(axis=1))
    return 0 if rows.size == 0 else int(rows[-1] - rows[0] + 1)


def vertical_cdr(disc, cup) -> float:
    disc_rows = _row_span(as_mask(disc))
    if disc_rows == 0:
        raise ValueError("vertical_cdr: disc mask is empty")
    return _row_span(as_mask(cup)) / disc_rows


@dataclass
class EvalRow:
    id: str
    dice_disc: float
    iou_disc: float
    dice_cup: float
    iou_cup: float
    cdr: float
    # binarized-prediction dice, reported in verbose mode only
    hard_dice_disc: float = float("nan")
    hard_dice_cup: float = float("nan")

    def values(self) -> tuple[float, ...]:
        return (self.dice_disc, self.iou_disc, self.dice_cup, self.iou_cup, self.cdr)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    seconds_per_image: float = float("nan")

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.rows]

    def mean(self) -> EvalRow:
        if not self.rows:
            return EvalRow("MEAN", *([float("nan")] * 7))
        cols = np.array([(*r.values(), r.hard_dice_disc, r.hard_dice_cup) for r in self.rows])
        with warnings.catch_warnings():
            # all-NaN columns (e.g. no CDR defined anywhere) stay NaN
            warnings.simplefilter("ignore", RuntimeWarning)
            m = np.nanmean(cols, axis=0)
        return EvalRow("MEAN", *map(float, m))

    @property
    def images_per_sec(self) -> float:
        return 1.0 / self.seconds_per_image if self.seconds_per_image > 0 else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for r in [*self.rows, self.mean()]:
            w.writerow([r.id, *(repr(float(v)) for v in r.values())])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != HEADER:
            raise ValueError(f"unexpected report header {header}")
        rows = []
        for rec in reader:
            if len(rec) != len(HEADER):
                raise ValueError(f"report row has {len(rec)} columns, expected {len(HEADER)}")
            if rec[0] == "MEAN":
                continue
            rows.append(EvalRow(rec[0], *map(float, rec[1:])))
        return cls(rows)
