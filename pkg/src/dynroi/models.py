"""PSBN, WRoIM and the two-U-Net baseline, assembled from engine + roi."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from . import metrics as M
from .roi import Centroid, CropWindow, binarize, centroid, window_at_scale


@dataclass(frozen=True)
class UNetSpec:
    depth: int
    base_channels: int
    convs_per_block: int = 2
    out_channels: int = 1
    kernel: int = 3

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** level for level in range(self.depth + 1)]


def encoder_shapes(prefix: str, spec: UNetSpec, in_channels: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c = in_channels
    for level, width in enumerate(spec.widths()):
        cfg = E.ConvBlockConfig(c, width, spec.kernel, spec.convs_per_block)
        shapes.update(E.block_shapes(f"{prefix}.l{level}", cfg))
        c = width
    return shapes


def decoder_shapes(prefix: str, spec: UNetSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    widths = spec.widths()
    for level in reversed(range(spec.depth)):
        w = widths[level]
        shapes.update(E.conv_shapes(f"{prefix}.l{level}.up", widths[level + 1], w, spec.kernel))
        cfg = E.ConvBlockConfig(2 * w, w, spec.kernel, spec.convs_per_block)
        shapes.update(E.block_shapes(f"{prefix}.l{level}", cfg))
    shapes.update(E.conv_shapes(f"{prefix}.head", widths[0], spec.out_channels, 1))
    return shapes


def unet_shapes(prefix: str, spec: UNetSpec, in_channels: int = 3) -> dict[str, tuple[int, ...]]:
    return {**encoder_shapes(f"{prefix}.enc", spec, in_channels),
            **decoder_shapes(f"{prefix}.dec", spec)}


def encode(params, prefix: str, spec: UNetSpec, x: E.Tensor) -> tuple[list[E.Tensor], E.Tensor]:
    """Returns per-level skip activations (finest first) and the bottleneck."""
    skips = []
    for level in range(spec.depth):
        x = E.conv_block(params, f"{prefix}.l{level}", x, spec.convs_per_block)
        skips.append(x)
        x = E.maxpool2(x)
    return skips, E.conv_block(params, f"{prefix}.l{spec.depth}", x, spec.convs_per_block)


def decode(params, prefix: str, spec: UNetSpec, x: E.Tensor, skips: list[E.Tensor]) -> E.Tensor:
    for level in reversed(range(spec.depth)):
        up = E.relu(E.conv2d(E.upsample2(x), params[f"{prefix}.l{level}.up.w"],
                             params[f"{prefix}.l{level}.up.b"]))
        x = E.conv_block(params, f"{prefix}.l{level}",
                         E.concat_channels(up, skips[level]), spec.convs_per_block)
    return E.conv2d(x, params[f"{prefix}.head.w"], params[f"{prefix}.head.b"])


def unet(params, prefix: str, spec: UNetSpec, x: E.Tensor) -> E.Tensor:
    skips, bottom = encode(params, f"{prefix}.enc", spec, x)
    return decode(params, f"{prefix}.dec", spec, bottom, skips)


def _check_frame(name: str, frame: int, crop_base: int, spec: UNetSpec) -> None:
    step = 2 ** spec.depth
    if frame % step:
        raise ValueError(f"{name}: frame {frame} not divisible by 2^depth = {step}")
    if not 0 < crop_base <= frame:
        raise ValueError(f"{name}: crop_base {crop_base} must lie in (0, {frame}]")


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class PSBNConfig:
    frame: int = 128
    encoder: UNetSpec = UNetSpec(depth=3, base_channels=16)
    crop_base: int = 0  # 0 -> frame // 2
    threshold: float = 0.5

    def __post_init__(self):
        if self.crop_base == 0:
            object.__setattr__(self, "crop_base", self.frame // 2)
        _check_frame("psbn", self.frame, self.crop_base, self.encoder)
        if self.crop_base % 2 ** self.encoder.depth:
            # every encoder scale must see an integral crop extent
            raise ValueError(f"psbn: crop_base {self.crop_base} not divisible by "
                             f"2^depth = {2 ** self.encoder.depth}")


@dataclass(frozen=True)
class WRoIMConfig:
    frame: int = 128
    weak: UNetSpec = UNetSpec(depth=1, base_channels=8)
    main: UNetSpec = UNetSpec(depth=3, base_channels=16, out_channels=3)
    crop_base: int = 0
    threshold: float = 0.5
    roi_weight: float = 1.0

    def __post_init__(self):
        if self.crop_base == 0:
            object.__setattr__(self, "crop_base", self.frame // 2)
        if self.weak.depth != 1:
            raise ValueError("wroim: weak U-Net must have depth 1")
        if self.main.out_channels != 3:
            raise ValueError("wroim: main U-Net must emit 3 channels")
        _check_frame("wroim", self.frame, self.crop_base, self.weak)
        _check_frame("wroim", self.crop_base, self.crop_base, self.main)


@dataclass(frozen=True)
class TwoModelConfig:
    frame: int = 128
    disc: UNetSpec = UNetSpec(depth=3, base_channels=16)
    cup: UNetSpec = UNetSpec(depth=3, base_channels=16)
    threshold: float = 0.5

    def __post_init__(self):
        _check_frame("twomodel", self.frame, self.frame, self.disc)
        _check_frame("twomodel", self.frame, self.frame, self.cup)


# ------------------------------------------------------------------ outputs


@dataclass
class Outputs:
    disc_prob: E.Tensor
    cup_prob: E.Tensor
    window: CropWindow | None = None
    degenerate: bool = False
    weak_disc: E.Tensor | None = None
    pred3: E.Tensor | None = None
    windows: dict[int, CropWindow] = field(default_factory=dict)


@dataclass
class Prediction:
    disc_prob: np.ndarray
    cup_prob: np.ndarray
    disc_mask: np.ndarray
    cup_mask: np.ndarray
    window: CropWindow | None
    degenerate: bool


def _as_image(image) -> E.Tensor:
    return image if isinstance(image, E.Tensor) else E.Tensor(image)


def forward_psbn(cfg: PSBNConfig, params, image, center: Centroid | None = None) -> Outputs:
    """Shared encoder; disc decoder at full frame; cup decoder on cropped activations.

    ``center`` overrides the disc-derived crop centre (used for gradient checks).
    """
    image = _as_image(image)
    N, spec = cfg.frame, cfg.encoder
    if image.shape != (3, N, N):
        raise E.ShapeError(f"psbn: expected image 3x{N}x{N}, got {image.shape}")
    skips, bottom = encode(params, "enc", spec, image)
    disc = E.sigmoid(decode(params, "disc", spec, bottom, skips))
    if center is None:
        center = centroid(binarize(disc, cfg.threshold))
    windows = {N >> level: window_at_scale(center, N, N >> level, cfg.crop_base)
               for level in range(spec.depth + 1)}
    x = E.crop_spatial(bottom, windows[N >> spec.depth])
    for level in reversed(range(spec.depth)):
        up = E.relu(E.conv2d(E.upsample2(x), params[f"cup.l{level}.up.w"], params[f"cup.l{level}.up.b"]))
        skip = E.crop_spatial(skips[level], windows[N >> level])
        if up.shape[1:] != skip.shape[1:]:
            raise E.ShapeError(f"psbn: cropped skip {skip.shape} does not match decoder {up.shape}")
        x = E.conv_block(params, f"cup.l{level}", E.concat_channels(up, skip), spec.convs_per_block)
    cup_small = E.sigmoid(E.conv2d(x, params["cup.head.w"], params["cup.head.b"]))
    window = windows[N]
    cup = E.pad_to_frame(cup_small, window, (N, N))
    return Outputs(disc, cup, window, center.degenerate, windows=windows)


def loss_psbn(out: Outputs, gt_disc, gt_cup, eps: float = 1e-5) -> E.Tensor:
    return E.add(M.log_dice_loss(gt_disc, out.disc_prob, eps),
                 M.log_dice_loss(gt_cup, out.cup_prob, eps))


def forward_wroim(cfg: WRoIMConfig, params, image, center: Centroid | None = None) -> Outputs:
    """Weak RoI U-Net proposes a crop of the image; main U-Net labels bg/cup/rim."""
    image = _as_image(image)
    N = cfg.frame
    if image.shape != (3, N, N):
        raise E.ShapeError(f"wroim: expected image 3x{N}x{N}, got {image.shape}")
    weak = E.sigmoid(unet(params, "weak", cfg.weak, image))
    if center is None:
        center = centroid(binarize(weak, cfg.threshold))
    window = window_at_scale(center, N, N, cfg.crop_base)
    pred3 = E.softmax_channels(unet(params, "main", cfg.main, E.crop_spatial(image, window)))
    cup_small = E.channel(pred3, 1)
    disc_small = E.add(cup_small, E.channel(pred3, 2))
    return Outputs(E.pad_to_frame(disc_small, window, (N, N)),
                   E.pad_to_frame(cup_small, window, (N, N)),
                   window, center.degenerate, weak_disc=weak, pred3=pred3,
                   windows={N: window})


def wroim_targets(gt_disc, gt_cup, window: CropWindow) -> list[np.ndarray]:
    """(background, cup, rim) ground truth cropped to ``window``."""
    rs, cs = window.slices()
    disc = np.asarray(gt_disc, dtype=np.uint8)[rs, cs]
    cup = np.asarray(gt_cup, dtype=np.uint8)[rs, cs]
    disc = disc | cup  # real annotations may leak the cup past the disc
    rim = disc & (1 - cup)
    return [1 - disc, cup, rim]


def loss_wroim(out: Outputs, gt_disc, gt_cup, eps: float = 1e-5, roi_weight: float = 1.0) -> E.Tensor:
    roi = M.log_dice_loss(gt_disc, out.weak_disc, eps)
    main = M.multi_channel_loss(wroim_targets(gt_disc, gt_cup, out.window), out.pred3, eps)
    return E.add(E.scale(roi, roi_weight), main)


def forward_twomodel(cfg: TwoModelConfig, params, image) -> Outputs:
    image = _as_image(image)
    N = cfg.frame
    if image.shape != (3, N, N):
        raise E.ShapeError(f"twomodel: expected image 3x{N}x{N}, got {image.shape}")
    return Outputs(E.sigmoid(unet(params, "disc", cfg.disc, image)),
                   E.sigmoid(unet(params, "cup", cfg.cup, image)))


# ------------------------------------------------------------ model objects


class Model:
    """Config + parameters + the forward/loss pair for one architecture."""

    kind = ""

    def __init__(self, config, seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = E.init_params(self.param_shapes(), np.random.default_rng(seed), dtype)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    def forward(self, image, center: Centroid | None = None) -> Outputs:
        raise NotImplementedError

    def loss(self, out: Outputs, gt_disc, gt_cup, eps: float = 1e-5) -> E.Tensor:
        return loss_psbn(out, gt_disc, gt_cup, eps)

    @property
    def frame(self) -> int:
        return self.config.frame

    def config_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self.config)}

    def config_hash(self) -> bytes:
        blob = json.dumps(self.config_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    def masks(self, out: Outputs) -> tuple[np.ndarray, np.ndarray]:
        t = self.config.threshold
        return binarize(out.disc_prob, t), binarize(out.cup_prob, t)

    def predict(self, image) -> Prediction:
        with E.no_grad():
            out = self.forward(image)
        disc_mask, cup_mask = self.masks(out)
        return Prediction(out.disc_prob.data[0], out.cup_prob.data[0], disc_mask, cup_mask,
                          out.window, out.degenerate)


class PSBN(Model):
    kind = "psbn"

    def param_shapes(self):
        spec = self.config.encoder
        return {**encoder_shapes("enc", spec, 3), **decoder_shapes("disc", spec),
                **decoder_shapes("cup", spec)}

    def forward(self, image, center=None):
        return forward_psbn(self.config, self.params, image, center)


class WRoIM(Model):
    kind = "wroim"

    def param_shapes(self):
        return {**unet_shapes("weak", self.config.weak), **unet_shapes("main", self.config.main)}

    def forward(self, image, center=None):
        return forward_wroim(self.config, self.params, image, center)

    def loss(self, out, gt_disc, gt_cup, eps=1e-5):
        return loss_wroim(out, gt_disc, gt_cup, eps, self.config.roi_weight)

    def masks(self, out):
        disc_small, cup_small = M.masks_from_channels(out.pred3)
        N = self.config.frame
        rs, cs = out.window.slices()
        disc = np.zeros((N, N), np.uint8)
        cup = np.zeros((N, N), np.uint8)
        disc[rs, cs] = disc_small
        cup[rs, cs] = cup_small
        return disc, cup


class TwoModel(Model):
    kind = "twomodel"

    def param_shapes(self):
        return {**unet_shapes("disc", self.config.disc), **unet_shapes("cup", self.config.cup)}

    def forward(self, image, center=None):
        return forward_twomodel(self.config, self.params, image)


MODELS = {cls.kind: cls for cls in (PSBN, WRoIM, TwoModel)}
CONFIGS = {"psbn": PSBNConfig, "wroim": WRoIMConfig, "twomodel": TwoModelConfig}


def build_model(kind: str, config=None, seed: int = 0, dtype=np.float32) -> Model:
    if kind not in MODELS:
        raise ValueError(f"unknown model {kind!r}; choose from {sorted(MODELS)}")
    return MODELS[kind](config if config is not None else CONFIGS[kind](), seed, dtype)


def paper_preset(kind: str):
    """Full-resolution configuration (N=512, base 32, depth 4)."""
    spec = UNetSpec(depth=4, base_channels=32)
    if kind == "psbn":
        return PSBNConfig(frame=512, encoder=spec)
    if kind == "wroim":
        return WRoIMConfig(frame=512, weak=UNetSpec(depth=1, base_channels=16),
                           main=UNetSpec(depth=4, base_channels=32, out_channels=3))
    if kind == "twomodel":
        return TwoModelConfig(frame=512, disc=spec, cup=spec)
    raise ValueError(f"unknown model {kind!r}")


# reference parameter counts reported for the full-size architectures
REFERENCE_PARAMS = {"wroim": 7.8e6, "psbn": 10.9e6, "twomodel": 15.6e6}


def preset_param_count(kind: str) -> int:
    cls = MODELS[kind]
    shell = cls.__new__(cls)
    shell.config = paper_preset(kind)
    return E.param_count(shell.param_shapes())
