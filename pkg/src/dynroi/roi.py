"""Moment-based region proposal: centroid, resolution mapping, crop windows."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CropWindow:
    row0: int
    col0: int
    height: int
    width: int

    def slices(self) -> tuple[slice, slice]:
        return (slice(self.row0, self.row0 + self.height),
                slice(self.col0, self.col0 + self.width))

    def inside(self, frame: tuple[int, int]) -> bool:
        h, w = frame
        return (self.row0 >= 0 and self.col0 >= 0 and self.height > 0 and self.width > 0
                and self.row0 + self.height <= h and self.col0 + self.width <= w)


@dataclass(frozen=True)
class Centroid:
    row: float
    col: float
    degenerate: bool = False


def as_mask(values) -> np.ndarray:
    """Validate and return a 2-D uint8 mask with entries in {0, 1}."""
    arr = np.asarray(values)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask entries must be exactly 0 or 1")
    return arr.astype(np.uint8, copy=False)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """Threshold a 1 x H x W (or H x W) probability map; ties go to 1."""
    arr = np.asarray(getattr(prob, "data", prob))
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"binarize expects a single channel, got shape {arr.shape}")
        arr = arr[0]
    return (arr >= threshold).astype(np.uint8)


def centroid(mask) -> Centroid:
    """First image moments over mass; frame centre with ``degenerate`` when empty."""
    m = np.asarray(mask, dtype=np.int64)
    h, w = m.shape
    total = int(m.sum())
    if total == 0:
        return Centroid((h - 1) / 2, (w - 1) / 2, degenerate=True)
    # integer moments are exact; one division each at the end
    row_mass = m.sum(axis=1)
    col_mass = m.sum(axis=0)
    r = int(row_mass @ np.arange(h, dtype=np.int64))
    c = int(col_mass @ np.arange(w, dtype=np.int64))
    return Centroid(r / total, c / total)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def map_center(center: Centroid, N: int, n: int, crop_base: int | None = None) -> tuple[int, int, int]:
    """Map an N-frame centre onto an n x n activation map.

    Returns ``(row, col, crop)`` where ``crop`` is the crop extent at scale n.
    """
    if N <= 0 or not 0 < n <= N:
        raise ValueError(f"need N > 0 and 0 < n <= N, got N={N}, n={n}")
    if crop_base is None:
        crop_base = N // 2
    return (round_half_away(center.row * n / N),
            round_half_away(center.col * n / N),
            round_half_away(n * crop_base / N))


def crop_window(center: tuple[int, int], crop: int, frame: tuple[int, int]) -> CropWindow:
    """crop x crop window centred on ``center``, translated to fit inside ``frame``."""
    h, w = frame
    if crop <= 0 or crop > h or crop > w:
        raise ValueError(f"crop {crop} does not fit frame {h}x{w}")
    row0 = min(max(center[0] - crop // 2, 0), h - crop)
    col0 = min(max(center[1] - crop // 2, 0), w - crop)
    return CropWindow(row0, col0, crop, crop)


def window_at_scale(c: Centroid, N: int, n: int, crop_base: int) -> CropWindow:
    row, col, crop = map_center(c, N, n, crop_base)
    return crop_window((row, col), crop, (n, n))
