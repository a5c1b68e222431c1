"""Plain-text ``key=value`` run configuration (one pair per line, ``#`` comments)."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import AugmentConfig
from .metrics import MetricsConfig
from .models import CONFIGS, PSBNConfig, TwoModelConfig, UNetSpec, WRoIMConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: str = "wroim"            # psbn | wroim | twomodel
    frame: int = 128                # network input size N
    crop_base: int = 0              # crop extent in the N frame; 0 means frame // 2
    depth: int = 3                  # pool/upsample stages of the main U-Nets
    base_channels: int = 16         # width of the first U-Net level, doubled per level
    convs_per_block: int = 2
    weak_base_channels: int = 8     # width of the depth-1 RoI U-Net (wroim)
    threshold: float = 0.5          # binarisation threshold for the crop centroid
    roi_weight: float = 1.0         # weight of the RoI loss term (wroim)
    lr: float = 1e-3
    momentum: float = 0.95
    batch_size: int = 1
    epochs: int = 100
    seed: int = 0
    augment: bool = True
    zoom_min: float = 0.8
    zoom_max: float = 1.2
    rotate_min: float = 0.0
    rotate_max: float = 50.0
    translate_min: float = 0.0
    translate_max: float = 0.1
    hflip: bool = True
    vflip: bool = True
    flip_prob: float = 0.5
    clahe: bool = True
    clahe_clip: float = 2.0
    clahe_tiles: int = 8
    eps: float = 1e-5
    iou_threshold: float = 0.5
    train_frac: float = 0.8
    validation: str = "split"       # split | train (validate on the training set)
    data: str = ""                  # dataset root
    out: str = ""                   # output directory

    def __post_init__(self):
        if self.model not in CONFIGS:
            raise ConfigError(f"model must be one of {sorted(CONFIGS)}, got {self.model!r}")
        if self.validation not in ("split", "train"):
            raise ConfigError(f"validation must be 'split' or 'train', got {self.validation!r}")

    def model_config(self):
        main = UNetSpec(self.depth, self.base_channels, self.convs_per_block)
        if self.model == "psbn":
            return PSBNConfig(self.frame, main, self.crop_base, self.threshold)
        if self.model == "wroim":
            return WRoIMConfig(self.frame, UNetSpec(1, self.weak_base_channels, self.convs_per_block),
                               replace(main, out_channels=3), self.crop_base, self.threshold,
                               self.roi_weight)
        return TwoModelConfig(self.frame, main, main, self.threshold)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.lr, self.momentum, self.batch_size, self.epochs, self.seed,
                           self.model, self.augment, self.eps)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig((self.zoom_min, self.zoom_max), (self.rotate_min, self.rotate_max),
                             (self.translate_min, self.translate_max), self.hflip, self.vflip,
                             self.flip_prob, self.seed)

    def metrics_config(self) -> MetricsConfig:
        return MetricsConfig(self.eps, self.iou_threshold)

    def dumps(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(kind, raw: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(text: str, source: str = "<config>", **overrides) -> RunConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(FIELD_TYPES[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    if path is None:
        return parse_config("", **overrides)
    path = Path(path)
    return parse_config(path.read_text(), str(path), **overrides)
