"""Trainable vision scaler: 1x1 colour mix, strided KxK feature extraction,
1x1 fusion to three channels and per-image zero-mean normalization.

Fractional downscale factors p/q are realised by a single stride-p kernel
evaluated on q phase-shifted sampling grids (see :class:`StridePlan`).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .fileio import ensure_dir, read_json, read_vten, write_json, write_vten
from .tensor import ConvLayer, Tensor, conv2d, conv2d_forward, record, relu
from .vltm import clamp01, ste_quantize


@dataclass(frozen=True)
class StridePlan:
    """Sampling schedule for a downscale factor ``num/den`` (lowest terms).

    Sampling points are 1-indexed pixel coordinates
    ``round_half_away(1 + m * num/den)``, m = 0, 1, ...; they repeat with
    period ``num`` every ``den`` points, so the schedule is ``den`` interleaved
    stride-``num`` grids starting at ``phase_offsets``.
    """

    num: int
    den: int

    @property
    def factor(self) -> Fraction:
        return Fraction(self.num, self.den)

    @property
    def base_stride(self) -> int:
        return self.num

    @property
    def phase_offsets(self) -> tuple[int, ...]:
        return tuple(((self.point(m) - 1) % self.num) + 1 for m in range(self.den))

    def point(self, m: int) -> int:
        # floor(1 + m*p/q + 1/2) in exact integer arithmetic
        return (3 * self.den + 2 * m * self.num) // (2 * self.den)

    def points(self, limit: int) -> list[int]:
        """All sampling points <= ``limit``."""
        if limit < 1:
            return []
        count = (limit - 1) * self.den // self.num + 1
        pts = [self.point(m) for m in range(count + 1)]
        return [p for p in pts if p <= limit]

    def phase_group(self, j: int, limit: int) -> list[int]:
        return list(range(self.phase_offsets[j], limit + 1, self.num))

    def output_extent(self, length: int) -> int:
        return len(self.points(length))

    def __str__(self) -> str:
        return f"{self.num}/{self.den}"


def build_stride_plan(factor_num: int, factor_den: int = 1) -> StridePlan:
    if factor_den <= 0 or factor_num <= 0:
        raise ConfigError("scale factor terms must be positive integers")
    f = Fraction(factor_num, factor_den)
    if f <= 1:
        raise ConfigError(f"downscale factor must exceed 1 (got {f}); upscaling is unsupported")
    return StridePlan(f.numerator, f.denominator)


def parse_factor(text) -> StridePlan:
    """Accept "5/2", "2.5", 2 or 2.5."""
    try:
        f = Fraction(str(text)).limit_denominator(64)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse scale factor {text!r}") from exc
    return build_stride_plan(f.numerator, f.denominator)


def _block_diag(wg: Tensor) -> Tensor:
    """Expand grouped fuse weights (3, N/3, 1, 1) into a block-diagonal (3, N, 1, 1) kernel."""
    groups, per = wg.shape[0], wg.shape[1]
    full = np.zeros((groups, groups * per, 1, 1), dtype=wg.dtype)
    for k in range(groups):
        full[k, k * per:(k + 1) * per] = wg.data[k]

    def back(g):
        return (np.stack([g[k, k * per:(k + 1) * per] for k in range(groups)]),)

    return record("block_diag", (wg,), full, back)


@dataclass
class TvsParams:
    color: ConvLayer
    extract: ConvLayer
    fuse: ConvLayer
    grouped: bool = False

    def __post_init__(self):
        k = self.kernel_size
        n = self.extract.weight.shape[0]
        fuse_in = self.fuse.weight.shape[1] * (3 if self.grouped else 1)
        if fuse_in != n:
            raise ShapeError(f"fuse layer consumes {fuse_in} channels but extraction emits {n}")
        if self.color.weight.shape != (3, 3, 1, 1):
            raise ShapeError("colour layer must be 3x3x1x1")
        if self.extract.weight.shape[1] != 3 or self.extract.weight.shape[2] != k:
            raise ShapeError("extraction layer must be N x 3 x K x K")

    @classmethod
    def create(cls, rng: np.random.Generator, k: int = 7, n: int = 30, factor="2/1", grouped: bool = False,
               dtype=np.float32) -> "TvsParams":
        plan = factor if isinstance(factor, StridePlan) else parse_factor(factor)
        if k % 2 == 0:
            raise ConfigError("TVS kernel size must be odd")
        if grouped and n % 3:
            raise ConfigError(f"grouped fusion needs N divisible by 3, got {n}")
        color = ConvLayer(Tensor(np.eye(3).reshape(3, 3, 1, 1).astype(dtype), True, "tvs.color.weight"),
                          Tensor(np.zeros(3, dtype), True, "tvs.color.bias"))
        # each block of N/3 features starts as an anti-alias Gaussian on one channel plus small noise;
        # chroma blocks get a 0.5 bias so the ReLU passes signed Cb/Cr
        blocks = np.array_split(np.arange(n), 3)
        r = np.arange(k) - k // 2
        g = np.exp(-(r / (0.5 * float(plan.factor))) ** 2 / 2)
        g2 = np.outer(g, g) / np.outer(g, g).sum()
        wx = 0.5 * rng.standard_normal((n, 3, k, k)) / math.sqrt(3 * k * k)
        bx = np.zeros(n)
        for c, block in enumerate(blocks):
            wx[block, c] += g2
            bx[block] = 0.5 if c else 0.0
        extract = ConvLayer(Tensor(wx.astype(dtype), True, "tvs.extract.weight"),
                            Tensor(bx.astype(dtype), True, "tvs.extract.bias"), stride=plan, padding=k // 2)
        if grouped:
            per = n // 3
            wf = np.full((3, per, 1, 1), 1.0 / per)
        else:
            wf = np.zeros((3, n, 1, 1))
            for c, block in enumerate(blocks):
                wf[c, block] = 1.0 / len(block)
        fuse = ConvLayer(Tensor(wf.astype(dtype), True, "tvs.fuse.weight"),
                         Tensor(np.zeros(3, dtype), True, "tvs.fuse.bias"))
        return cls(color, extract, fuse, grouped)

    @property
    def kernel_size(self) -> int:
        return self.extract.weight.shape[2]

    @property
    def n_features(self) -> int:
        return self.extract.weight.shape[0]

    @property
    def plan(self) -> StridePlan:
        s = self.extract.stride
        return s if isinstance(s, StridePlan) else build_stride_plan(int(s), 1)

    @property
    def params(self) -> list[Tensor]:
        return self.color.params + self.extract.params + self.fuse.params

    def with_plan(self, plan: StridePlan) -> "TvsParams":
        """Same weights, different sampling schedule."""
        return dataclasses.replace(self, extract=dataclasses.replace(self.extract, stride=plan))

    def manifest(self) -> dict:
        return {"k": self.kernel_size, "n": self.n_features, "factor": str(self.plan), "grouped": self.grouped}


def color_convert(x: Tensor, layer: ConvLayer) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"colour conversion expects 3 channels, got shape {x.shape}")
    return conv2d_forward(x, layer)


def extract_features(x: Tensor, layer: ConvLayer, plan: StridePlan | None = None) -> Tensor:
    """Convolution sampled on ``plan``'s grid (both axes), then ReLU."""
    plan = plan or (layer.stride if isinstance(layer.stride, StridePlan) else build_stride_plan(int(layer.stride)))
    k = layer.weight.shape[2]
    if k > 1 and plan.factor > k - 1:
        raise ConfigError(f"factor {plan} exceeds the single-pass limit K-1 = {k - 1}")
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} smaller than kernel {k}")
    return relu(conv2d(x, layer.weight, layer.bias, plan, layer.padding, layer.pad_mode))


def fuse_features(features: Tensor, layer: ConvLayer, grouped: bool = False) -> Tensor:
    n = features.shape[1]
    if grouped:
        if n % 3:
            raise ConfigError(f"grouped fusion needs N divisible by 3, got {n}")
        if layer.weight.shape != (3, n // 3, 1, 1):
            raise ShapeError(f"grouped fuse weights must be (3, {n // 3}, 1, 1)")
        return conv2d(features, _block_diag(layer.weight), layer.bias)
    return conv2d_forward(features, layer)


def zero_mean_normalize(x: Tensor) -> Tensor:
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    return record("zero_mean", (x,), x.data - mu,
                  lambda g: (g - g.mean(axis=(2, 3), keepdims=True),))


def tvs_forward(x: Tensor, params: TvsParams, out_bits: int | None = None, in_bits: int = 8,
                surrogate: bool = False, taps: dict | None = None) -> Tensor:
    """colour -> extract -> fuse -> [quantize] -> zero-mean.

    ``out_bits`` moves bit-depth reduction to the TVS output: the fused
    channels are clamped to [0, 1] and bit-shift quantized (straight-through)
    before normalization.
    """
    y = color_convert(x, params.color)
    f = extract_features(y, params.extract, params.plan)
    z = fuse_features(f, params.fuse, params.grouped)
    if out_bits is not None:
        plane, z = ste_quantize(clamp01(z), in_bits, out_bits, surrogate=surrogate)
        if taps is not None:
            taps["plane"] = plane
    if taps is not None:
        taps["transmitted"] = z
    return zero_mean_normalize(z)


def pseudo_color(output) -> np.ndarray:
    """Map three feature channels to an (H, W, 3) uint8 image by per-channel min-max."""
    arr = np.asarray(output.data if isinstance(output, Tensor) else output, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[0]
    if arr.shape[0] != 3:
        raise ShapeError("pseudo_color expects three channels")
    out = np.empty(arr.shape, dtype=np.uint8)
    for c in range(3):
        lo, hi = arr[c].min(), arr[c].max()
        if hi - lo <= 0:
            out[c] = 128
        else:
            out[c] = np.floor((arr[c] - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)
    return out.transpose(1, 2, 0)


_LAYER_FILES = ("color", "extract", "fuse")


def save_tvs(directory, params: TvsParams) -> None:
    d = ensure_dir(directory)
    for name in _LAYER_FILES:
        layer = getattr(params, name)
        write_vten(d / f"tvs_{name}_weight.vten", layer.weight.data)
        write_vten(d / f"tvs_{name}_bias.vten", layer.bias.data)
    write_json(d / "tvs.json", params.manifest())


def load_tvs(directory, dtype=np.float32) -> TvsParams:
    d = Path(directory)
    man = read_json(d / "tvs.json")
    k, n, grouped = int(man["k"]), int(man["n"]), bool(man["grouped"])
    shapes = {"color": ((3, 3, 1, 1), 3), "extract": ((n, 3, k, k), n),
              "fuse": ((3, n // 3 if grouped else n, 1, 1), 3)}
    layers = {}
    for name in _LAYER_FILES:
        wshape, blen = shapes[name]
        w = read_vten(d / f"tvs_{name}_weight.vten")
        b = read_vten(d / f"tvs_{name}_bias.vten")
        if w.size != int(np.prod(wshape)) or b.size != blen:
            raise ConfigError(f"tvs {name} weights do not match manifest k={k}, n={n}")
        layers[name] = (Tensor(w.reshape(wshape).astype(dtype), True, f"tvs.{name}.weight"),
                        Tensor(b.reshape(blen).astype(dtype), True, f"tvs.{name}.bias"))
    plan = parse_factor(man["factor"])
    return TvsParams(ConvLayer(*layers["color"]), ConvLayer(*layers["extract"], stride=plan, padding=k // 2),
                     ConvLayer(*layers["fuse"]), grouped)
