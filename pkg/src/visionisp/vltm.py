"""Vision local tone mapping on the luminance plane.

Global gamma, box-filter detail boost, then bit-shift quantization. During
training the quantizer is bypassed in the backward pass (straight-through).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .tensor import Tensor, box_filter, record

GAMMA_MIN = 0.05


@dataclass
class VltmParams:
    gamma: Tensor = field(default_factory=lambda: Tensor(np.array(1.0), requires_grad=True, name="vltm.gamma"))
    alpha: Tensor = field(default_factory=lambda: Tensor(np.array(1.0), requires_grad=True, name="vltm.alpha"))
    window: int = 5
    out_bits: int = 8
    in_bits: int = 8

    def __post_init__(self):
        if not isinstance(self.gamma, Tensor):
            self.gamma = Tensor(np.array(float(self.gamma)), requires_grad=True, name="vltm.gamma")
        if not isinstance(self.alpha, Tensor):
            self.alpha = Tensor(np.array(float(self.alpha)), requires_grad=True, name="vltm.alpha")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"VLTM window must be odd and positive, got {self.window}")
        if not 1 <= self.out_bits <= self.in_bits <= 16 or self.out_bits > 8:
            raise ConfigError(f"need 1 <= out_bits <= 8 and out_bits <= in_bits <= 16, "
                              f"got out_bits={self.out_bits}, in_bits={self.in_bits}")
        if float(self.gamma.data) <= 0:
            raise ConfigError("gamma must be positive")

    @property
    def params(self) -> list[Tensor]:
        return [self.gamma, self.alpha]

    def project(self) -> None:
        """Re-impose gamma >= GAMMA_MIN after an optimizer step."""
        np.maximum(self.gamma.data, GAMMA_MIN, out=self.gamma.data)

    def to_dict(self) -> dict:
        return {"gamma": float(self.gamma.data), "alpha": float(self.alpha.data), "window": self.window,
                "out_bits": self.out_bits, "in_bits": self.in_bits}

    @classmethod
    def from_dict(cls, d: dict) -> "VltmParams":
        return cls(gamma=d.get("gamma", 1.0), alpha=d.get("alpha", 1.0), window=d.get("window", 5),
                   out_bits=d.get("out_bits", 8), in_bits=d.get("in_bits", 8))


@dataclass
class QuantizedPlane:
    """Integer plane(s) with a declared bit depth; leading axes are batch-like."""

    bits: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.size and (self.values.min() < 0 or self.values.max() > (1 << self.bits) - 1):
            raise DomainError(f"values outside [0, {(1 << self.bits) - 1}]")

    @property
    def dims(self) -> tuple[int, int]:
        return self.values.shape[-2:]

    @property
    def maxval(self) -> int:
        return (1 << self.bits) - 1

    def dequantize(self, dtype=np.float64) -> np.ndarray:
        return (self.values / self.maxval).astype(dtype)


def gamma_transform(y: Tensor, gamma: Tensor) -> Tensor:
    """``y ** gamma`` for y in [0, 1], with bounded gradients at y = 0."""
    if y.data.size and (y.data.min() < 0 or y.data.max() > 1):
        raise DomainError("gamma_transform input must lie in [0, 1]")
    g = float(gamma.data)
    yv = y.data
    out = np.power(yv, g)

    def back(up):
        dy = g * np.power(yv, g - 1.0, where=yv > 0, out=np.zeros_like(yv))
        if g >= 1:
            dy = np.where(yv > 0, dy, g if g == 1 else 0.0)
        else:
            dy = np.where(yv < 1e-6, 0.0, dy)
        logy = np.log(yv, where=yv > 0, out=np.zeros_like(yv))
        dgamma = np.sum(up * out * logy)
        return (up * dy).astype(yv.dtype), np.asarray(dgamma, dtype=gamma.dtype).reshape(gamma.shape)

    return record("gamma", (y, gamma), out, back)


def clamp01(x: Tensor) -> Tensor:
    inside = (x.data >= 0) & (x.data <= 1)
    return record("clamp01", (x,), np.clip(x.data, 0.0, 1.0),
                  lambda g: (np.where(inside, g, 0).astype(g.dtype),))


def detail_enhance(y_prime: Tensor, alpha: Tensor, window: int = 5) -> Tensor:
    """``clamp(lpf + alpha * (y' - lpf))`` with ``lpf`` a replicate-padded box mean."""
    if y_prime.data.ndim != 4 or y_prime.shape[1] != 1:
        raise DomainError("detail_enhance expects a single-channel NCHW plane")
    lpf = box_filter(y_prime, window)
    return clamp01(lpf + alpha * (y_prime - lpf))


def _levels(y: np.ndarray, in_bits: int, out_bits: int) -> np.ndarray:
    if out_bits < 1:
        raise ConfigError("out_bits must be at least 1")
    if out_bits > in_bits:
        raise ConfigError(f"out_bits {out_bits} exceeds in_bits {in_bits}")
    if y.size and (y.min() < 0 or y.max() > 1):
        raise DomainError("bit_depth_reduce input must lie in [0, 1]")
    full = np.floor(y.astype(np.float64) * ((1 << in_bits) - 1) + 0.5).astype(np.int64)
    return full >> (in_bits - out_bits)


def bit_depth_reduce(y_out, in_bits: int = 8, out_bits: int = 4) -> QuantizedPlane:
    data = y_out.data if isinstance(y_out, Tensor) else np.asarray(y_out, dtype=np.float64)
    return QuantizedPlane(out_bits, _levels(data, in_bits, out_bits))


def ste_quantize(x: Tensor, in_bits: int, out_bits: int, surrogate: bool = False) -> tuple[QuantizedPlane, Tensor]:
    """Quantize-then-dequantize with an identity backward pass.

    With ``surrogate`` the forward value is left unquantized too, which makes
    the recorded gradient the exact derivative of the evaluated function
    (used by gradient checks).
    """
    plane = bit_depth_reduce(x, in_bits, out_bits)
    deq = x.data if surrogate else plane.dequantize(x.dtype)
    return plane, record("ste_quantize", (x,), np.array(deq, dtype=x.dtype), lambda g: (g,))


def vltm_forward(y_in: Tensor, params: VltmParams, quantize: bool = True,
                 surrogate: bool = False) -> tuple[QuantizedPlane | None, Tensor]:
    """gamma -> detail boost -> bit-depth reduction.

    Returns the quantized plane and its dequantized real-valued counterpart.
    With ``quantize=False`` the tone-mapped plane is returned unquantized
    (bit reduction happens elsewhere) and the plane slot is ``None``.
    """
    y_prime = gamma_transform(y_in, params.gamma)
    y_out = detail_enhance(y_prime, params.alpha, params.window)
    if not quantize:
        return None, y_out
    return ste_quantize(y_out, params.in_bits, params.out_bits, surrogate=surrogate)
