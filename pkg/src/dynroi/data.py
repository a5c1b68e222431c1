"""Dataset IO, CLAHE, augmentation, splitting and the synthetic fundus generator."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .roi import as_mask

log = logging.getLogger(__name__)

IMAGE_DIR, DISC_DIR, CUP_DIR = "images", "masks_disc", "masks_cup"
SYNTH_META = "synthetic.csv"


@dataclass
class Sample:
    id: str
    image: np.ndarray  # 3 x N x N float32 in [0, 1]
    disc: np.ndarray   # N x N uint8 in {0, 1}
    cup: np.ndarray
    meta: dict = field(default_factory=dict)


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent stream for ``keys`` that does not depend on call order."""
    digest = hashlib.sha256(repr(keys).encode()).digest()
    words = np.frombuffer(digest[:16], dtype="<u4").tolist()
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words]))


# ------------------------------------------------------------------- loading


def _stems(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"missing directory: {directory}")
    return {p.stem: p for p in sorted(directory.glob("*.png"))}


def read_image(path, frame: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if frame is not None and im.size != (frame, frame):
            im = im.resize((frame, frame), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255))


def read_mask(path, frame: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    values = np.unique(arr)
    if not (set(values.tolist()) <= {0, 255} or set(values.tolist()) <= {0, 1}):
        raise ValueError(f"non-binary mask {path}: values {values[:8].tolist()}...")
    mask = (arr > 0).astype(np.uint8)
    if frame is not None and mask.shape != (frame, frame):
        mask = np.asarray(Image.fromarray(mask).resize((frame, frame), Image.NEAREST))
    return as_mask(mask)


def load_dataset(root, frame: int) -> list[Sample]:
    root = Path(root)
    images = _stems(root / IMAGE_DIR)
    discs = _stems(root / DISC_DIR)
    cups = _stems(root / CUP_DIR)
    missing = sorted(set(images) ^ set(discs) | set(images) ^ set(cups))
    if missing:
        raise FileNotFoundError(f"unmatched stems under {root}: {', '.join(missing)}")
    if not images:
        log.warning("no samples found under %s", root)
    meta = _read_meta(root / SYNTH_META)
    samples = []
    for stem in sorted(images):
        img = read_image(images[stem], frame)
        disc = read_mask(discs[stem], frame)
        cup = read_mask(cups[stem], frame)
        if (cup & (1 - disc)).any():
            log.warning("sample %s: cup mask extends outside disc", stem)
        samples.append(Sample(stem, img, disc, cup, dict(meta.get(stem, {}))))
    return samples


def _read_meta(path: Path) -> dict[str, dict]:
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        return {row["id"]: {"cdr": float(row["cdr"])} for row in csv.DictReader(fh)}


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(as_mask(mask) * np.uint8(255), mode="L").save(path)


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def write_dataset(samples: list[Sample], out) -> Path:
    out = Path(out)
    for sub in (IMAGE_DIR, DISC_DIR, CUP_DIR):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(s.image, out / IMAGE_DIR / f"{s.id}.png")
        save_mask(s.disc, out / DISC_DIR / f"{s.id}.png")
        save_mask(s.cup, out / CUP_DIR / f"{s.id}.png")
    if any("cdr" in s.meta for s in samples):
        with open(out / SYNTH_META, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "cdr"])
            for s in samples:
                w.writerow([s.id, repr(float(s.meta["cdr"]))])
    return out


# --------------------------------------------------------------------- CLAHE


def _clip_histograms(hist: np.ndarray, limit: float) -> np.ndarray:
    """Clip each row at ``limit``; hand the excess out evenly to bins with room."""
    hist = hist.astype(np.float64)
    excess = np.maximum(hist - limit, 0).sum(axis=-1)
    hist = np.minimum(hist, limit)
    for _ in range(hist.shape[-1]):
        room = hist < limit
        n_room = room.sum(axis=-1)
        active = (excess > 1e-9) & (n_room > 0)
        if not active.any():
            break
        share = np.where(active, excess / np.maximum(n_room, 1), 0.0)
        grown = np.where(room, np.minimum(hist + share[..., None], limit), hist)
        excess = excess - (grown - hist).sum(axis=-1)
        hist = grown
    return hist


def clahe_mappings(plane_q: np.ndarray, tiles: int, clip: float) -> np.ndarray:
    """Per-tile grey-level maps, shape (tiles, tiles, 256), values in [0, 1]."""
    n = plane_q.shape[0]
    ts = n // tiles
    blocks = plane_q.reshape(tiles, ts, tiles, ts).transpose(0, 2, 1, 3).reshape(tiles, tiles, ts * ts)
    hist = np.zeros((tiles, tiles, 256), dtype=np.int64)
    for i in range(tiles):
        for j in range(tiles):
            hist[i, j] = np.bincount(blocks[i, j], minlength=256)
    hist = _clip_histograms(hist, clip * ts * ts / 256)
    cdf = np.cumsum(hist, axis=-1)
    # midpoint of each bin's CDF step keeps flat inputs in place
    return (cdf - hist / 2) / cdf[..., -1:]


def _axis_weights(n: int, tiles: int):
    ts = n // tiles
    pos = (np.arange(n) - (ts - 1) / 2) / ts
    pos = np.clip(pos, 0, tiles - 1)
    lo = np.minimum(np.floor(pos).astype(int), tiles - 1)
    hi = np.minimum(lo + 1, tiles - 1)
    return lo, hi, pos - lo


def clahe(image: np.ndarray, clip: float = 2.0, tiles: int = 8) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation per RGB channel.

    Values are quantised to 8 bits, equalised per tile, then blended bilinearly
    between the four nearest tile maps; output is 8-bit quantised in [0, 1].
    """
    image = np.asarray(image)
    c, h, w = image.shape
    if h != w or h % tiles:
        raise ValueError(f"clahe: {tiles} tiles do not divide a {h}x{w} image")
    rlo, rhi, rw = _axis_weights(h, tiles)
    clo, chi, cw = _axis_weights(w, tiles)
    rw, cw = rw[:, None], cw[None, :]
    out = np.empty(image.shape, dtype=np.float32)
    for ch in range(c):
        q = np.clip(np.rint(image[ch].astype(np.float64) * 255), 0, 255).astype(np.int64)
        maps = clahe_mappings(q, tiles, clip)
        m = lambda ti, tj: maps[ti[:, None], tj[None, :], q]  # noqa: E731
        val = ((1 - rw) * ((1 - cw) * m(rlo, clo) + cw * m(rlo, chi))
               + rw * ((1 - cw) * m(rhi, clo) + cw * m(rhi, chi)))
        out[ch] = np.rint(val * 255) / 255
    return out


def apply_clahe(samples: list[Sample], clip: float = 2.0, tiles: int = 8) -> list[Sample]:
    return [replace(s, image=clahe(s.image, clip, tiles)) for s in samples]


# -------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    zoom_range: tuple[float, float] = (0.8, 1.2)
    rotate_range_deg: tuple[float, float] = (0.0, 50.0)
    translate_frac: tuple[float, float] = (0.0, 0.1)
    hflip: bool = True
    vflip: bool = True
    flip_prob: float = 0.5
    seed: int = 0

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls((1.0, 1.0), (0.0, 0.0), (0.0, 0.0), False, False)


def _warp(plane: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int) -> np.ndarray:
    return ndimage.affine_transform(plane, matrix, offset, order=order, mode="constant", cval=0.0)


def augment(s: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """One random zoom/rotation/translation/flip, applied identically to image and masks."""
    zoom = rng.uniform(*cfg.zoom_range)
    theta = math.radians(rng.uniform(*cfg.rotate_range_deg))
    shift = rng.uniform(*cfg.translate_frac, size=2) * rng.choice([-1.0, 1.0], size=2)
    flip_h = cfg.hflip and rng.random() < cfg.flip_prob
    flip_v = cfg.vflip and rng.random() < cfg.flip_prob

    _, h, w = s.image.shape
    image, disc, cup = s.image, s.disc, s.cup
    if zoom != 1.0 or theta != 0.0 or shift.any():
        centre = np.array([(h - 1) / 2, (w - 1) / 2])
        cos, sin = math.cos(theta), math.sin(theta)
        # inverse of p' = c + zoom * R (p - c) + t, with R counter-clockwise on screen
        inv = np.array([[cos, sin], [-sin, cos]]) / zoom
        offset = centre - inv @ (centre + shift * np.array([h, w]))
        image = np.stack([_warp(p, inv, offset, 1) for p in image]).astype(s.image.dtype)
        image = np.clip(image, 0, 1)
        disc = _warp(disc.astype(np.float32), inv, offset, 0).round().astype(np.uint8)
        cup = _warp(cup.astype(np.float32), inv, offset, 0).round().astype(np.uint8)
    if flip_h:
        image, disc, cup = image[:, :, ::-1], disc[:, ::-1], cup[:, ::-1]
    if flip_v:
        image, disc, cup = image[:, ::-1, :], disc[::-1, :], cup[::-1, :]
    return replace(s, image=np.ascontiguousarray(image), disc=np.ascontiguousarray(disc),
                   cup=np.ascontiguousarray(cup))


def split(samples: list, train_frac: float = 0.8, seed: int = 0) -> tuple[list, list]:
    n = len(samples)
    if n < 2:
        raise ValueError(f"split needs at least 2 samples, got {n}")
    order = derive_rng(seed, "split").permutation(n)
    n_train = min(math.ceil(train_frac * n), n - 1)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


# ----------------------------------------------------------------- synthetic


def _ellipse(yy, xx, cy, cx, a, b) -> np.ndarray:
    return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2


def _render(rng: np.random.Generator, N: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    yy, xx = np.mgrid[0:N, 0:N].astype(np.float64)

    # disc: exactly D rows, centred on an integer column so every row is hit
    D = int(rng.integers(math.ceil(0.2 * N), math.floor(0.4 * N) + 1))
    disc_aspect = rng.uniform(0.85, 1.0)
    half_w = D / 2 * disc_aspect
    margin = 2
    r0 = int(rng.integers(margin, N - D - margin + 1))
    cx = int(rng.integers(math.ceil(half_w) + margin, N - math.ceil(half_w) - margin))
    cy = r0 + (D - 1) / 2
    rho_disc = _ellipse(yy, xx, cy, cx, D / 2, half_w)
    disc = (rho_disc <= 1).astype(np.uint8)

    lo, hi = math.ceil(0.3 * D), math.floor(0.8 * D)
    C = int(np.clip(round(rng.uniform(0.3, 0.8) * D), lo, hi))
    cup_aspect = rng.uniform(0.85, 1.05)
    slack = (D - C) // 6
    r0c = r0 + (D - C) // 2 + int(rng.integers(-slack, slack + 1))
    cxc = cx + int(rng.integers(-slack, slack + 1))
    cup = None
    for _ in range(2):
        rho_cup = _ellipse(yy, xx, r0c + (C - 1) / 2, cxc, C / 2, min(C / 2 * cup_aspect, half_w * 0.95))
        cup = (rho_cup <= 1).astype(np.uint8) & disc
        if np.flatnonzero(cup.any(axis=1)).size == C:
            break
        # fall back to a concentric cup, which always keeps its full row span
        r0c, cxc = r0 + (D - C) // 2, cx

    # fundus background: reddish, darker towards the rim of the field
    fy, fx = rng.uniform(0.35, 0.65, size=2) * N
    radial = np.clip(1 - 0.7 * (((yy - fy) ** 2 + (xx - fx) ** 2) / (0.75 * N) ** 2), 0.15, 1)
    base = np.array([rng.uniform(0.5, 0.65), rng.uniform(0.18, 0.26), rng.uniform(0.06, 0.12)])
    img = base[:, None, None] * radial[None]

    # soft-edged disc and a paler cup whose edge is deliberately gradual
    disc_w = 1 / (1 + np.exp((np.sqrt(rho_disc) - 1) * 18))
    cup_w = 1 / (1 + np.exp((np.sqrt(rho_cup) - 1) * 8))
    disc_col = np.array([0.92, 0.62, 0.30]) * rng.uniform(0.9, 1.0)
    cup_col = np.array([1.0, 0.78, 0.5]) * rng.uniform(0.95, 1.0)
    img = img * (1 - disc_w) + disc_col[:, None, None] * disc_w
    img = img * (1 - cup_w) + cup_col[:, None, None] * cup_w

    # vessels radiating from near the disc centre
    canvas = Image.new("L", (N, N), 0)
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.integers(2, 6))):
        angle = rng.uniform(0, 2 * math.pi)
        pts = [(cx + rng.normal(0, D / 8), cy + rng.normal(0, D / 8))]
        for _ in range(4):
            angle += rng.normal(0, 0.35)
            step = rng.uniform(0.15, 0.3) * N
            pts.append((pts[-1][0] + step * math.cos(angle), pts[-1][1] + step * math.sin(angle)))
        draw.line(pts, fill=255, width=int(rng.integers(1, 4)))
    vessel = np.asarray(canvas, dtype=np.float64) / 255
    vessel = ndimage.gaussian_filter(vessel, 0.7)
    img = img * (1 - 0.55 * vessel[None])

    img = img + rng.normal(0, 0.015, size=img.shape)
    img = np.clip(img, 0, 1)
    # 8-bit quantisation makes the PNG round trip exact
    img = (np.rint(img * 255).astype(np.uint8).astype(np.float32) / np.float32(255))
    return img, disc, cup, C / D


def gen_synthetic(count: int, seed: int, N: int) -> list[Sample]:
    """Fundus-like images with exact disc/cup masks; ``meta['cdr']`` is the drawn ratio."""
    if N < 32:
        raise ValueError(f"synthetic frame must be >= 32, got {N}")
    samples = []
    for i in range(count):
        img, disc, cup, cdr = _render(derive_rng(seed, "synthetic", i), N)
        samples.append(Sample(f"syn{i:04d}", img, disc, cup, {"cdr": cdr}))
    return samples
