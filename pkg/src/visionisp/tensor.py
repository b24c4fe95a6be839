"""Dense NCHW tensors with a recording tape for reverse-mode gradients.

Only the operators used by the pipeline are provided. Each operator computes
its forward value with numpy and, when a :class:`GradTape` is active and any
input requires a gradient, appends a closure that maps the output gradient to
input gradients. ``GradTape.backward`` replays those closures in exact reverse
order.
"""
from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DomainError, NumericError, ShapeError

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar("visionisp_tape", default=None)


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Images and feature maps are rank 4 ``(batch, channels, height, width)``;
    biases and scalar parameters use whatever rank is natural.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded. ``backward(loss)`` writes ``.grad`` on every leaf tensor that
    requires a gradient and was reached (existing gradients are overwritten).
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def backward(self, loss: Tensor, seed_grad: np.ndarray | None = None) -> list[str]:
        """Propagate gradients; returns the op names in the order visited."""
        if seed_grad is None:
            if loss.data.size != 1:
                raise ShapeError("backward needs a scalar loss or an explicit seed gradient")
            seed_grad = np.ones_like(loss.data)
        pending: dict[int, tuple[Tensor, np.ndarray]] = {id(loss): (loss, seed_grad)}
        visited = []
        for entry in reversed(self.entries):
            slot = pending.pop(id(entry.output), None)
            if slot is None:
                continue
            visited.append(entry.op)
            in_grads = entry.backward(slot[1])
            for t, g in zip(entry.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                prev = pending.get(id(t))
                pending[id(t)] = (t, g if prev is None else prev[1] + g)
        for t, g in pending.values():
            t.grad = g
        return visited


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPE.get()


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    """Wrap ``out`` in a Tensor and log it on the active tape if needed."""
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        tape.record(TapeEntry(op, tuple(inputs), result, backward))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    return record("mul", (a, b), a.data * b.data,
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype, copy=False),
                  lambda g: (np.where(mask, g, 0).astype(g.dtype, copy=False),))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def total(x: Tensor) -> Tensor:
    return record("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype),
                  lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return record("mean", (x,), np.asarray(x.data.mean(), dtype=x.dtype),
                  lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def square(x: Tensor) -> Tensor:
    return record("square", (x,), x.data * x.data, lambda g: (2 * g * x.data,))


# ---------------------------------------------------------------- structural


def take_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return record("take_channels", (x,), x.data[:, start:stop], back)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return record("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis),
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


def separable_linear(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str = "separable_linear") -> Tensor:
    """``out[n,c] = rows @ x[n,c] @ cols.T`` with fixed resampling matrices."""
    if x.data.ndim != 4 or rows.shape[1] != x.shape[2] or cols.shape[1] != x.shape[3]:
        raise ShapeError(f"{op}: matrices {rows.shape}/{cols.shape} do not fit input {x.shape}")
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = np.einsum("ih,nchw,jw->ncij", rows, x.data, cols, optimize=True)
    return record(op, (x,), out,
                  lambda g: (np.einsum("ih,ncij,jw->nchw", rows, g, cols, optimize=True),))


def adaptive_pool_matrix(length: int, bins: int) -> np.ndarray:
    """Averaging matrix with bin edges floor(i*L/G) .. ceil((i+1)*L/G)."""
    if bins > length:
        raise ShapeError(f"cannot pool extent {length} into {bins} bins")
    m = np.zeros((bins, length))
    for i in range(bins):
        lo = (i * length) // bins
        hi = -((-(i + 1) * length) // bins)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    return separable_linear(x, adaptive_pool_matrix(x.shape[2], out_hw[0]),
                            adaptive_pool_matrix(x.shape[3], out_hw[1]), op="adaptive_avg_pool")


def adaptive_max_pool(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Max over the same uneven bins as :func:`adaptive_pool_matrix`."""
    n, c, h, w = x.shape
    gh, gw = out_hw
    if gh > h or gw > w:
        raise ShapeError(f"cannot pool {h}x{w} into {gh}x{gw} bins")
    rb = [((i * h) // gh, -((-(i + 1) * h) // gh)) for i in range(gh)]
    cb = [((j * w) // gw, -((-(j + 1) * w) // gw)) for j in range(gw)]
    out = np.empty((n, c, gh, gw), dtype=x.dtype)
    where = []
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            block = x.data[:, :, r0:r1, c0:c1].reshape(n, c, -1)
            arg = block.argmax(axis=2)
            out[:, :, i, j] = np.take_along_axis(block, arg[..., None], axis=2)[..., 0]
            rr, cc = np.unravel_index(arg, (r1 - r0, c1 - c0))
            where.append((i, j, rr + r0, cc + c0))

    def back(g):
        gx = np.zeros_like(x.data)
        ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        for i, j, rr, cc in where:
            np.add.at(gx, (ni, ci, rr, cc), g[:, :, i, j])
        return (gx,)

    return record("adaptive_max_pool", (x,), out, back)


def bilinear_matrix(length: int, out_length: int, factor: float) -> np.ndarray:
    """Tent-kernel resampling matrix, half-pixel (align_corners=False) convention."""
    m = np.zeros((out_length, length))
    for o in range(out_length):
        src = min(max((o + 0.5) * factor - 0.5, 0.0), length - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, length - 1)
        t = src - lo
        m[o, lo] += 1.0 - t
        m[o, hi] += t
    return m


# ---------------------------------------------------------------- padding


def pad2d(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zero":
        return np.pad(x, widths)
    if mode == "replicate":
        return np.pad(x, widths, mode="edge")
    raise ConfigError(f"unknown padding mode {mode!r}")


def _fold_edges(g: np.ndarray, pad: int, axis: int) -> np.ndarray:
    n = g.shape[axis] - 2 * pad
    core = np.take(g, np.arange(pad, pad + n), axis=axis).copy()
    lead = np.take(g, np.arange(0, pad), axis=axis).sum(axis=axis)
    tail = np.take(g, np.arange(pad + n, 2 * pad + n), axis=axis).sum(axis=axis)
    idx = [slice(None)] * g.ndim
    idx[axis] = 0
    core[tuple(idx)] += lead
    idx[axis] = n - 1
    core[tuple(idx)] += tail
    return core


def unpad2d(g: np.ndarray, pad: int, mode: str) -> np.ndarray:
    """Adjoint of :func:`pad2d`."""
    if pad == 0:
        return g
    if mode == "zero":
        return g[:, :, pad:-pad, pad:-pad]
    return _fold_edges(_fold_edges(g, pad, 3), pad, 2)


# ---------------------------------------------------------------- convolution


@dataclass
class ConvLayer:
    """Convolution weights plus geometry.

    ``stride`` is an integer or any plan object exposing ``points(limit)``
    (1-indexed sampling coordinates); a sampling point ``s`` places the
    window's first tap at padded coordinate ``s - 1``.
    """

    weight: Tensor
    bias: Tensor
    stride: object = 1
    padding: int = 0
    pad_mode: str = "zero"

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ShapeError("conv kernel must be (C_out, C_in, K_h, K_w)")
        c_out, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.bias.shape != (c_out,):
            raise ShapeError(f"bias length {self.bias.shape} != C_out {c_out}")

    @property
    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


def window_starts(stride, padded: int, k: int) -> np.ndarray:
    """0-indexed window starts along one padded axis."""
    if isinstance(stride, (int, np.integer)):
        if stride < 1:
            raise ConfigError("stride must be a positive integer")
        starts = np.arange(0, max(padded - k + 1, 0), int(stride))
    else:
        starts = np.asarray(stride.points(padded), dtype=np.int64) - 1
        starts = starts[starts + k <= padded]
    return starts


def _as_slice(starts: np.ndarray):
    if len(starts) == 1:
        return slice(int(starts[0]), int(starts[0]) + 1)
    steps = np.diff(starts)
    if np.all(steps == steps[0]):
        return slice(int(starts[0]), int(starts[-1]) + 1, int(steps[0]))
    return None


def _gather_windows(xp: np.ndarray, hs: np.ndarray, ws: np.ndarray, kh: int, kw: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    sh, sw = _as_slice(hs), _as_slice(ws)
    if sh is not None and sw is not None:
        return win[:, :, sh, sw]
    return win[:, :, hs[:, None], ws[None, :]]


def _pointwise(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """1x1, stride 1, unpadded convolution as a channel contraction."""
    wmat = weight.data[:, :, 0, 0].astype(x.dtype, copy=False)
    out = np.einsum("oc,nchw->nohw", wmat, x.data, optimize=True)
    if bias is not None:
        out = out + bias.data.astype(x.dtype, copy=False)[None, :, None, None]

    def back(g):
        g_w = np.einsum("nohw,nchw->oc", g, x.data, optimize=True).reshape(weight.shape)
        g_x = np.einsum("oc,nohw->nchw", wmat, g, optimize=True) if x.requires_grad else None
        if bias is None:
            return g_x, g_w
        return g_x, g_w, g.sum(axis=(0, 2, 3))

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv2d", inputs, out, back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding: int = 0,
           pad_mode: str = "zero") -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    if kh == kw == 1 and padding == 0 and isinstance(stride, (int, np.integer)) and stride == 1:
        return _pointwise(x, weight, bias)
    xp = pad2d(x.data, padding, pad_mode)
    hp, wp = xp.shape[2], xp.shape[3]
    hs = window_starts(stride, hp, kh)
    ws = window_starts(stride, wp, kw)
    if len(hs) == 0 or len(ws) == 0:
        raise DomainError(f"empty conv output: padded input {hp}x{wp}, kernel {kh}x{kw}, stride {stride}")
    ho, wo = len(hs), len(ws)
    wmat = weight.data.reshape(c_out, -1).astype(x.dtype, copy=False)
    cols = _gather_windows(xp, hs, ws, kh, kw).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data.astype(x.dtype, copy=False)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        g_w = (gm.T @ cols).reshape(weight.shape)
        g_b = gm.sum(axis=0) if bias is not None else None
        g_x = None
        if x.requires_grad:
            # (kh, kw, n, c, ho, wo) so every tap slice is contiguous
            gcols = np.ascontiguousarray((gm @ wmat).reshape(n, ho, wo, c_in, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros_like(xp)
            sh, sw = _as_slice(hs), _as_slice(ws)
            for i in range(kh):
                for j in range(kw):
                    if sh is not None and sw is not None:
                        rs = slice(sh.start + i, sh.stop + i, sh.step)
                        cs = slice(sw.start + j, sw.stop + j, sw.step)
                        gxp[:, :, rs, cs] += gcols[i, j]
                    else:
                        gxp[:, :, (hs + i)[:, None], (ws + j)[None, :]] += gcols[i, j]
            g_x = unpad2d(gxp, padding, pad_mode)
        return (g_x, g_w, g_b) if bias is not None else (g_x, g_w)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv2d", inputs, out, back)


def conv2d_forward(x: Tensor, layer: ConvLayer) -> Tensor:
    return conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding, layer.pad_mode)


def conv2d_backward(grad_out: np.ndarray, entry: TapeEntry):
    """Run the saved backward closure of a recorded conv2d entry.

    Returns ``(grad_input, grad_kernel, grad_bias)``.
    """
    if entry.op != "conv2d":
        raise ShapeError(f"entry is a {entry.op!r}, not conv2d")
    if grad_out.shape != entry.output.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {entry.output.shape}")
    grads = list(entry.backward(grad_out))
    if len(grads) == 2:
        grads.append(None)
    return tuple(grads)


# ---------------------------------------------------------------- box filter


def _box_axis(x: np.ndarray, window: int, axis: int) -> np.ndarray:
    return sliding_window_view(x, window, axis=axis).mean(axis=-1)


def box_filter(x: Tensor, window: int) -> Tensor:
    """Mean over a window x window neighbourhood with replicate padding."""
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"box filter window must be odd and positive, got {window}")
    r = window // 2
    xp = pad2d(x.data, r, "replicate")
    out = _box_axis(_box_axis(xp, window, 3), window, 2)

    def back(g):
        # adjoint of a valid sliding mean is a full sliding mean of the zero-padded gradient
        gp = np.pad(g, ((0, 0), (0, 0), (window - 1, window - 1), (window - 1, window - 1)))
        full = _box_axis(_box_axis(gp, window, 3), window, 2)
        return (unpad2d(full, r, "replicate"),)

    return record("box_filter", (x,), out.astype(x.dtype, copy=False), back)


# ---------------------------------------------------------------- training utils


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], lr: float) -> list[Tensor]:
    """In-place ``p <- p - lr * g``; a ``None`` gradient leaves ``p`` untouched."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        if lr:
            p.data -= (lr * np.asarray(g)).astype(p.dtype, copy=False)
    return list(params)


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor], step: float = 1e-4,
               samples: int | None = None, rng: np.random.Generator | None = None, floor: float = 1e-6) -> float:
    """Max relative error of tape gradients against central differences.

    ``f(params)`` must return a scalar Tensor. With ``samples`` set, only that
    many randomly chosen coordinates per parameter are perturbed. The error is
    ``|a - n| / max(floor, |a| + |n|)``, so gradients that are structurally
    zero are judged on absolute difference rather than on rounding noise.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    with GradTape() as tape:
        loss = f(params)
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("objective is not finite at the base point")
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(params).data)
            flat[i] = orig - step
            fm = float(f(params).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"objective not finite when perturbing {p.name or 'parameter'}[{i}]")
            num = (fp - fm) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(floor, abs(a) + abs(num)))
    return worst
