"""Minimal reverse-mode autodiff over C x H x W numpy arrays.

Every differentiable op appends a node to a :class:`Tape`; :func:`backward`
walks the tape in exact reverse append order. Leaves (tensors created with
``requires_grad=True`` and no producing node) accumulate into ``.grad``
until :func:`zero_grad` is called.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .roi import CropWindow

# name -> forward callable; consumed by the finite-difference suite
DIFFERENTIABLE_OPS: dict[str, Callable] = {}

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_branch_log: contextvars.ContextVar["list | None"] = contextvars.ContextVar("branch_log", default=None)


class ShapeError(ValueError):
    pass


def _register(name: str):
    def deco(fn):
        DIFFERENTIABLE_OPS[name] = fn
        return fn
    return deco


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of the ops executed in one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)

    def release(self) -> None:
        """Drop all nodes; breaks tensor/tape reference cycles after a step."""
        for node in self.nodes:
            node.output.node = None
            node.output.tape = None
        self.nodes.clear()


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def record_branches():
    """Collect the discrete choices (relu masks, pool argmax, clamps) made inside."""
    log: list[bytes] = []
    token = _branch_log.set(log)
    try:
        yield log
    finally:
        _branch_log.reset(token)


def _note_branch(choice: np.ndarray) -> None:
    log = _branch_log.get()
    if log is not None:
        log.append(np.packbits(choice.astype(bool)).tobytes() if choice.dtype == bool
                   else choice.tobytes())


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar used by the loss code
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if not _grad_enabled.get() or not any(t.requires_grad for t in inputs):
        return out
    tape = _active_tape.get()
    if tape is None:
        tapes = list({id(t.tape): t.tape for t in inputs if t.tape is not None}.values())
        tape = tapes[0] if tapes else Tape()
        for other in tapes[1:]:
            _merge(tape, other)
    out.requires_grad = True
    out.tape = tape
    out.node = Node(op, inputs, out, backward_fn)
    tape.nodes.append(out.node)
    return out


def _merge(into: Tape, other: Tape) -> None:
    # independent subgraphs share no edges, so concatenation stays topological
    for node in other.nodes:
        node.output.tape = into
    into.nodes.extend(other.nodes)
    other.nodes = into.nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.tape is None:
        if loss.requires_grad:
            # loss is itself a leaf
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(loss.tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                pending[key] = ig if key not in pending else pending[key] + ig


def zero_grad(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------- elementwise


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


@_register("add")
def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    if b.data.ndim == 0:
        return _make("add", a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum())))
    _check_same("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


@_register("sub")
def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    if a.data.ndim == 0 or b.data.ndim == 0:
        out = a.data - b.data

        def bwd(g):
            ga = g if a.data.ndim else np.asarray(g.sum())
            gb = -g if b.data.ndim else np.asarray(-g.sum())
            return ga, gb
        return _make("sub", out, (a, b), bwd)
    _check_same("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


@_register("mul")
def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


@_register("div")
def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_same("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


@_register("scale")
def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


@_register("sum")
def sum_(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return _make("sum", np.asarray(a.data.sum(dtype=dtype)), (a,),
                 lambda g: (np.full(shape, g, dtype=dtype),))


@_register("log")
def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


@_register("clamp_min")
def clamp_min(a: Tensor, floor: float) -> Tensor:
    ad = a.data
    keep = ~(ad < floor)  # NaN passes through so divergence stays visible
    _note_branch(keep)
    out = np.where(keep, ad, a.dtype.type(floor))
    return _make("clamp_min", out, (a,), lambda g: (np.where(keep, g, 0).astype(g.dtype),))


@_register("relu")
def relu(x: Tensor) -> Tensor:
    xd = x.data
    _note_branch(xd > 0)
    return _make("relu", np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


@_register("sigmoid")
def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign to avoid exp overflow
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


@_register("softmax_channels")
def softmax_channels(x: Tensor) -> Tensor:
    if x.data.ndim != 3 or x.shape[0] < 2:
        raise ShapeError(f"softmax_channels expects C x H x W with C >= 2, got {x.shape}")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=0, keepdims=True)
    return _make("softmax_channels", s, (x,),
                 lambda g: (s * (g - (g * s).sum(axis=0, keepdims=True)),))


@_register("channel")
def channel(x: Tensor, index: int) -> Tensor:
    """Slice one channel out as a 1 x H x W tensor."""
    shape, dtype = x.shape, x.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g[0]
        return (full,)
    return _make("channel", x.data[index:index + 1].copy(), (x,), bwd)


# ------------------------------------------------------------- spatial ops


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    c = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))  # C,H,W,k,k
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def _conv2d_backward(g, cols, wmat, wshape, in_shape, dtype):
    c_out, c_in, k, _ = wshape
    _, h, w = in_shape
    g2 = g.reshape(c_out, h * w)
    gw = (g2 @ cols.T).reshape(wshape)
    gb = g2.sum(axis=1)
    dcols = (wmat.T @ g2).reshape(c_in, k, k, h, w)
    p = k // 2
    gxp = np.zeros((c_in, h + 2 * p, w + 2 * p), dtype=dtype)
    for di in range(k):
        for dj in range(k):
            gxp[:, di:di + h, dj:dj + w] += dcols[:, di, dj]
    gx = gxp[:, p:p + h, p:p + w] if p else gxp
    return gx, gw, gb


@_register("conv2d")
def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Cross-correlation with zero same-padding: (C_in,H,W) -> (C_out,H,W)."""
    if padding != "same":
        raise ValueError(f"unsupported padding {padding!r}")
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be C x H x W, got {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be C_out x C_in x k x k, got {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d in_channels: input has {x.shape[0]}, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d out_channels: bias has shape {bias.shape}, weight has {c_out}")
    _, h, w = x.shape
    p = k // 2
    xd = x.data
    xp = np.pad(xd, ((0, 0), (p, p), (p, p))) if p else xd
    cols = _im2col(xp, k, h, w)
    wmat = weight.data.reshape(c_out, c_in * k * k)
    out = (wmat @ cols).reshape(c_out, h, w) + bias.data[:, None, None]
    in_shape, wshape, dtype = x.shape, weight.shape, xd.dtype
    del cols  # k*k times the padded input; rebuilt on demand in backward
    # module-level lookup at call time, so tests can swap the backward
    return _make("conv2d", out, (x, weight, bias),
                 lambda g: _conv2d_backward(g, _im2col(xp, k, h, w), wmat, wshape, in_shape, dtype))


@_register("maxpool2")
def maxpool2(x: Tensor) -> Tensor:
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got {h}x{w}")
    blocks = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)  # first max wins: row-major tie-break
    _note_branch(arg.astype(np.uint8))
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    dtype = x.dtype

    def bwd(g):
        gb = np.zeros((c, h // 2, w // 2, 4), dtype=dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)
    return _make("maxpool2", out, (x,), bwd)


@_register("upsample2")
def upsample2(x: Tensor) -> Tensor:
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _make("upsample2", out, (x,),
                 lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),))


@_register("concat_channels")
def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape[1:]} vs {b.shape[1:]}")
    ca = a.shape[0]
    return _make("concat_channels", np.concatenate([a.data, b.data], axis=0), (a, b),
                 lambda g: (g[:ca], g[ca:]))


def _check_window(window: CropWindow, h: int, w: int, op: str) -> None:
    if (window.row0 < 0 or window.col0 < 0 or window.height <= 0 or window.width <= 0
            or window.row0 + window.height > h or window.col0 + window.width > w):
        raise ShapeError(f"{op}: window {window} outside frame {h}x{w}")


@_register("crop_spatial")
def crop_spatial(x: Tensor, window: CropWindow) -> Tensor:
    c, h, w = x.shape
    _check_window(window, h, w, "crop_spatial")
    rs, cs = window.slices()
    dtype = x.dtype

    def bwd(g):
        full = np.zeros((c, h, w), dtype=dtype)
        full[:, rs, cs] = g
        return (full,)
    return _make("crop_spatial", x.data[:, rs, cs].copy(), (x,), bwd)


@_register("pad_to_frame")
def pad_to_frame(x: Tensor, window: CropWindow, frame: tuple[int, int]) -> Tensor:
    c, h, w = x.shape
    fh, fw = frame
    _check_window(window, fh, fw, "pad_to_frame")
    if (h, w) != (window.height, window.width):
        raise ShapeError(f"pad_to_frame: tensor extent {h}x{w} != window extent "
                         f"{window.height}x{window.width}")
    rs, cs = window.slices()
    out = np.zeros((c, fh, fw), dtype=x.dtype)
    out[:, rs, cs] = x.data
    return _make("pad_to_frame", out, (x,), lambda g: (g[:, rs, cs],))


# ----------------------------------------------------------------- layers


@dataclass(frozen=True)
class ConvBlockConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3
    convs_per_block: int = 2
    activation: str = "relu"

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.activation != "relu":
            raise ValueError(f"unsupported block activation {self.activation!r}")


def conv_shapes(prefix: str, c_in: int, c_out: int, k: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w": (c_out, c_in, k, k), f"{prefix}.b": (c_out,)}


def block_shapes(prefix: str, cfg: ConvBlockConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c = cfg.in_channels
    for i in range(cfg.convs_per_block):
        shapes.update(conv_shapes(f"{prefix}.conv{i}", c, cfg.out_channels, cfg.kernel))
        c = cfg.out_channels
    return shapes


def conv_block(params: Mapping[str, Tensor], prefix: str, x: Tensor, convs: int) -> Tensor:
    for i in range(convs):
        x = relu(conv2d(x, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"]))
    return x


def init_params(shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator,
                dtype=np.float32) -> dict[str, Tensor]:
    """He-uniform weights, zero biases, in the insertion order of ``shapes``."""
    params: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def param_count(network) -> int:
    """Total scalar parameters of a model, a params mapping, or a shapes mapping."""
    if hasattr(network, "param_shapes"):
        network = network.param_shapes()
    if isinstance(network, Mapping):
        values = network.values()
    else:
        values = network
    total = 0
    for v in values:
        shape = v.shape if isinstance(v, (Tensor, np.ndarray)) else v
        total += math.prod(shape)
    return total
