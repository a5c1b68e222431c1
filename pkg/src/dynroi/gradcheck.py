"""Central finite-difference checks for every registered differentiable op
and for the three model forwards at toy sizes (64-bit)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as E
from . import metrics as M
from . import models as Mo
from .roi import Centroid, CropWindow

STEP = 1e-5
TOLERANCE = 1e-4
# below this magnitude both gradients are treated as zero
DENOM_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), DENOM_FLOOR)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def check(fn: Callable[[list[E.Tensor]], E.Tensor], arrays: list[np.ndarray],
          rng: np.random.Generator, max_coords: int | None = None, step: float = STEP) -> float:
    """Max relative error of d fn / d arrays[i] against central differences.

    ``fn`` maps leaf tensors to a scalar tensor. With ``max_coords`` only that
    many randomly chosen coordinates per array are probed.
    """
    leaves = [E.Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    E.backward(fn(leaves))
    worst = 0.0
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, max_coords, replace=False)
        analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)).reshape(-1)[idx]
        numeric = np.empty(len(idx))
        smooth = np.ones(len(idx), dtype=bool)
        with E.no_grad():
            with E.record_branches() as base:
                fn(leaves)
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                with E.record_branches() as b_up:
                    up = float(fn(leaves).data)
                flat[i] = orig - step
                with E.record_branches() as b_down:
                    down = float(fn(leaves).data)
                flat[i] = orig
                numeric[k] = (up - down) / (2 * step)
                # a kink inside [x-h, x+h] invalidates the central difference
                smooth[k] = b_up == base == b_down
        if not smooth.any():
            continue
        worst = max(worst, rel_error(analytic[smooth], numeric[smooth]))
    return worst


def _weighted(out: E.Tensor, weights: np.ndarray) -> E.Tensor:
    return E.sum_(E.mul(out, E.Tensor(weights)))


def _shape(rng, channels=(1, 3), even=True) -> tuple[int, int, int]:
    c = int(rng.integers(channels[0], channels[1] + 1))
    h, w = (int(rng.integers(1, 4)) * 2 for _ in range(2)) if even else rng.integers(2, 7, size=2)
    return c, int(h), int(w)


def _random_window(rng, h, w) -> CropWindow:
    hh, ww = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
    return CropWindow(int(rng.integers(0, h - hh + 1)), int(rng.integers(0, w - ww + 1)), hh, ww)


# each case draws a random problem and returns (fn, arrays)
def _case_unary(op):
    def case(rng):
        shape = _shape(rng, even=False)
        x = rng.normal(size=shape)
        r = rng.normal(size=shape)
        return (lambda t: _weighted(op(t[0]), r)), [x]
    return case


def _case_binary(op, positive_b=False):
    def case(rng):
        shape = _shape(rng, even=False)
        a = rng.normal(size=shape)
        b = rng.uniform(0.5, 2.0, size=shape) if positive_b else rng.normal(size=shape)
        r = rng.normal(size=shape)
        return (lambda t: _weighted(op(t[0], t[1]), r)), [a, b]
    return case


def _case_conv(rng):
    c_in, h, w = _shape(rng, even=False)
    c_out = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 5]))
    x, wt, b = rng.normal(size=(c_in, h, w)), rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out)
    r = rng.normal(size=(c_out, h, w))
    return (lambda t: _weighted(E.conv2d(t[0], t[1], t[2]), r)), [x, wt, b]


def _case_softmax(rng):
    c, h, w = _shape(rng, channels=(2, 4), even=False)
    x, r = rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))
    return (lambda t: _weighted(E.softmax_channels(t[0]), r)), [x]


def _case_maxpool(rng):
    shape = _shape(rng)
    x = rng.normal(size=shape)
    r = rng.normal(size=(shape[0], shape[1] // 2, shape[2] // 2))
    return (lambda t: _weighted(E.maxpool2(t[0]), r)), [x]


def _case_upsample(rng):
    shape = _shape(rng, even=False)
    r = rng.normal(size=(shape[0], shape[1] * 2, shape[2] * 2))
    return (lambda t: _weighted(E.upsample2(t[0]), r)), [rng.normal(size=shape)]


def _case_concat(rng):
    c1, h, w = _shape(rng, even=False)
    c2 = int(rng.integers(1, 4))
    r = rng.normal(size=(c1 + c2, h, w))
    return ((lambda t: _weighted(E.concat_channels(t[0], t[1]), r)),
            [rng.normal(size=(c1, h, w)), rng.normal(size=(c2, h, w))])


def _case_crop(rng):
    c, h, w = _shape(rng, even=False)
    win = _random_window(rng, h, w)
    r = rng.normal(size=(c, win.height, win.width))
    return (lambda t: _weighted(E.crop_spatial(t[0], win), r)), [rng.normal(size=(c, h, w))]


def _case_pad(rng):
    c, h, w = _shape(rng, even=False)
    win = _random_window(rng, h, w)
    r = rng.normal(size=(c, h, w))
    return ((lambda t: _weighted(E.pad_to_frame(t[0], win, (h, w)), r)),
            [rng.normal(size=(c, win.height, win.width))])


def _case_channel(rng):
    c, h, w = _shape(rng, channels=(1, 4), even=False)
    i = int(rng.integers(0, c))
    r = rng.normal(size=(1, h, w))
    return (lambda t: _weighted(E.channel(t[0], i), r)), [rng.normal(size=(c, h, w))]


def _case_sum(rng):
    shape = _shape(rng, even=False)
    return (lambda t: E.scale(E.sum_(t[0]), 1.7)), [rng.normal(size=shape)]


def _case_log(rng):
    shape = _shape(rng, even=False)
    r = rng.normal(size=shape)
    return (lambda t: _weighted(E.log(t[0]), r)), [rng.uniform(0.5, 2.0, size=shape)]


def _case_clamp(rng):
    shape = _shape(rng, even=False)
    x = np.where(rng.random(shape) < 0.5, rng.uniform(0.0, 0.4, shape), rng.uniform(0.6, 1.0, shape))
    r = rng.normal(size=shape)
    return (lambda t: _weighted(E.clamp_min(t[0], 0.5), r)), [x]


def _case_scale(rng):
    shape = _shape(rng, even=False)
    c = float(rng.normal())
    r = rng.normal(size=shape)
    return (lambda t: _weighted(E.scale(t[0], c), r)), [rng.normal(size=shape)]


OP_CASES: dict[str, Callable] = {
    "add": _case_binary(E.add),
    "sub": _case_binary(E.sub),
    "mul": _case_binary(E.mul),
    "div": _case_binary(E.div, positive_b=True),
    "scale": _case_scale,
    "sum": _case_sum,
    "log": _case_log,
    "clamp_min": _case_clamp,
    "relu": _case_unary(E.relu),
    "sigmoid": _case_unary(E.sigmoid),
    "softmax_channels": _case_softmax,
    "channel": _case_channel,
    "conv2d": _case_conv,
    "maxpool2": _case_maxpool,
    "upsample2": _case_upsample,
    "concat_channels": _case_concat,
    "crop_spatial": _case_crop,
    "pad_to_frame": _case_pad,
}


# ------------------------------------------------------------- composites


def _toy_masks(rng, n):
    disc = np.zeros((n, n), np.uint8)
    r0, c0 = (int(v) for v in rng.integers(1, n // 2, size=2))
    disc[r0:r0 + n // 2, c0:c0 + n // 2] = 1
    cup = np.zeros_like(disc)
    cup[r0 + 2:r0 + n // 2 - 2, c0 + 2:c0 + n // 2 - 2] = 1
    return disc, cup


def _case_pipeline(rng):
    """conv -> relu -> pool -> sigmoid -> log-dice."""
    x = rng.normal(size=(2, 8, 8))
    w, b = rng.normal(size=(3, 2, 3, 3)) * 0.5, rng.normal(size=3) * 0.1
    target = (rng.random((4, 4)) < 0.5).astype(np.uint8)
    target[0, 0] = 1

    def fn(t):
        h = E.maxpool2(E.relu(E.conv2d(t[0], t[1], t[2])))
        return M.log_dice_loss(target, E.sigmoid(E.channel(h, 0)))
    return fn, [x, w, b]


def _model_case(kind: str):
    spec = Mo.UNetSpec(depth=2, base_channels=2)
    configs = {
        "psbn": Mo.PSBNConfig(frame=16, encoder=spec, crop_base=8),
        "wroim": Mo.WRoIMConfig(frame=16, weak=Mo.UNetSpec(1, 2),
                                main=Mo.UNetSpec(2, 2, out_channels=3), crop_base=8),
        "twomodel": Mo.TwoModelConfig(frame=16, disc=spec, cup=spec),
    }

    def case(rng):
        model = Mo.build_model(kind, configs[kind], seed=int(rng.integers(1 << 30)), dtype=np.float64)
        names = list(model.params)
        image = rng.uniform(0, 1, size=(3, 16, 16))
        disc, cup = _toy_masks(rng, 16)
        # fixed crop centre: the window stays put under perturbation
        center = Centroid(float(rng.integers(4, 12)), float(rng.integers(4, 12)), degenerate=True)

        def fn(t):
            params = dict(zip(names, t[1:]))
            model.params = params
            out = model.forward(t[0], center=center)
            return model.loss(out, disc, cup)
        return fn, [image] + [model.params[k].data.copy() for k in names]
    return case


COMPOSITE_CASES: dict[str, Callable] = {
    "pipeline(conv-relu-pool-dice)": _case_pipeline,
    "model:psbn": _model_case("psbn"),
    "model:wroim": _model_case("wroim"),
    "model:twomodel": _model_case("twomodel"),
}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    trials: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_suite(seed: int = 0, trials: int = 20, model_trials: int = 2,
              model_coords: int = 4) -> list[CheckResult]:
    missing = set(E.DIFFERENTIABLE_OPS) - set(OP_CASES)
    if missing:
        raise RuntimeError(f"no gradient check registered for: {sorted(missing)}")
    results = []
    for name in E.DIFFERENTIABLE_OPS:
        rng = np.random.default_rng([seed, len(results)])
        worst = max(check(*OP_CASES[name](rng), rng) for _ in range(trials))
        results.append(CheckResult(name, worst, trials))
    for name, case in COMPOSITE_CASES.items():
        rng = np.random.default_rng([seed, len(results)])
        n = model_trials if name.startswith("model:") else trials
        worst = max(check(*case(rng), rng, max_coords=model_coords) for _ in range(n))
        results.append(CheckResult(name, worst, n))
    return results
