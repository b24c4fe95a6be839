"""Vision-driven denoiser tuning.

A bilateral filter with a blend control stands in for an ISP denoising block.
Its three parameters are tuned by a bounded Nelder-Mead search that
minimizes the absolute feature-map difference, measured inside a fixed
detector, between denoised noisy images and their clean references.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .detector import BackboneNet, backbone_features
from .errors import ConfigError, ShapeError
from .rng import substream
from .tensor import Tensor

PARAM_NAMES = ("sigma_spatial", "sigma_range", "blend")
DEFAULT_BOUNDS = {"sigma_spatial": (0.3, 4.0), "sigma_range": (0.01, 1.0), "blend": (0.0, 1.0)}
MIN_BUDGET = 20


@dataclass
class DenoiserParams:
    sigma_spatial: float = 1.0
    sigma_range: float = 0.1
    blend: float = 0.5

    def __post_init__(self):
        if not (self.sigma_spatial > 0 and self.sigma_range > 0):
            raise ConfigError("denoiser sigmas must be positive")
        if not 0.0 <= self.blend <= 1.0:
            raise ConfigError("denoiser blend must lie in [0, 1]")

    def as_vector(self) -> np.ndarray:
        return np.array([self.sigma_spatial, self.sigma_range, self.blend], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> "DenoiserParams":
        return cls(*(float(x) for x in v))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NoiseSpec:
    variance: float
    seed: int = 0


def inject_noise(clean, spec: NoiseSpec, stream: int = 0, clamp: bool = True):
    """Additive i.i.d. Gaussian noise, clamped to [0, 1] unless ``clamp`` is off."""
    data = clean.data if isinstance(clean, Tensor) else np.asarray(clean)
    if spec.variance < 0:
        raise ConfigError("noise variance must be non-negative")
    rng = substream(spec.seed, "noise", stream)
    noise = rng.standard_normal(data.shape) * math.sqrt(spec.variance)
    out = data + noise
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    out = out.astype(data.dtype)
    return Tensor(out) if isinstance(clean, Tensor) else out


def bilateral_denoise(noisy, params: DenoiserParams):
    """Joint-RGB bilateral filter (edge padding) blended with its input.

    Window radius is ceil(2 * sigma_spatial); the range kernel uses the
    Euclidean distance across channels.
    """
    data = noisy.data if isinstance(noisy, Tensor) else np.asarray(noisy)
    if params.sigma_spatial <= 0 or params.sigma_range <= 0:
        raise ConfigError("denoiser sigmas must be positive")
    if params.blend == 0.0:
        return noisy
    x = data.astype(np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    r = int(math.ceil(2 * params.sigma_spatial))
    h, w = x.shape[2], x.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    acc = np.zeros_like(x)
    norm = np.zeros((x.shape[0], 1, h, w))
    inv_s = 1.0 / (2 * params.sigma_spatial ** 2)
    inv_r = 1.0 / (2 * params.sigma_range ** 2)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = xp[:, :, r + dy:r + dy + h, r + dx:r + dx + w]
            d2 = np.sum((shifted - x) ** 2, axis=1, keepdims=True)
            wgt = math.exp(-(dy * dy + dx * dx) * inv_s) * np.exp(-d2 * inv_r)
            acc += wgt * shifted
            norm += wgt
    filtered = acc / norm
    out = params.blend * filtered + (1.0 - params.blend) * x
    if squeeze:
        out = out[0]
    out = out.astype(data.dtype)
    return Tensor(out) if isinstance(noisy, Tensor) else out


def feature_content_loss(a, b, net: BackboneNet, layer_tap: int = 2) -> float:
    """Sum of absolute differences of the tapped feature maps of ``a`` and ``b``."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b))
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    fa = backbone_features(a, net, layer_tap).data.astype(np.float64)
    fb = backbone_features(b, net, layer_tap).data.astype(np.float64)
    return float(np.abs(fa - fb).sum())


class BudgetExhausted(Exception):
    pass


def nelder_mead(fun: Callable[[np.ndarray], float], x0, lower, upper, budget: int, rel_step: float = 0.2,
                reflect: float = 1.0, expand: float = 2.0, contract: float = 0.5, shrink: float = 0.5,
                xtol: float = 1e-7, ftol: float = 1e-12):
    """Bounded Nelder-Mead; candidates are clipped into [lower, upper].

    Never evaluates ``fun`` more than ``budget`` times. Returns
    ``(best_x, best_f, history)`` where history lists every evaluation.
    """
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    history: list[tuple[np.ndarray, float]] = []

    def f(x):
        if len(history) >= budget:
            raise BudgetExhausted
        x = np.clip(x, lower, upper)
        val = float(fun(x))
        history.append((x.copy(), val))
        return val

    def best():
        i = int(np.argmin([h[1] for h in history]))
        return history[i][0], history[i][1]

    x0 = np.clip(np.asarray(x0, float), lower, upper)
    n = len(x0)
    simplex = [x0]
    for i in range(n):
        step = rel_step * x0[i] if x0[i] != 0 else rel_step * (upper[i] - lower[i])
        v = x0.copy()
        v[i] = x0[i] + step
        if v[i] > upper[i]:
            v[i] = x0[i] - step
        simplex.append(np.clip(v, lower, upper))
    try:
        values = [f(v) for v in simplex]
        while True:
            order = np.argsort(values, kind="stable")
            simplex = [simplex[i] for i in order]
            values = [values[i] for i in order]
            spread = max(np.max(np.abs(v - simplex[0])) for v in simplex[1:]) if n else 0.0
            if spread < xtol or values[-1] - values[0] < ftol:
                break
            centroid = np.mean(simplex[:-1], axis=0)
            worst = simplex[-1]
            xr = np.clip(centroid + reflect * (centroid - worst), lower, upper)
            fr = f(xr)
            if fr < values[0]:
                xe = np.clip(centroid + expand * (xr - centroid), lower, upper)
                fe = f(xe)
                simplex[-1], values[-1] = (xe, fe) if fe < fr else (xr, fr)
                continue
            if fr < values[-2]:
                simplex[-1], values[-1] = xr, fr
                continue
            if fr < values[-1]:
                xc = np.clip(centroid + contract * (xr - centroid), lower, upper)
                fc = f(xc)
                if fc <= fr:
                    simplex[-1], values[-1] = xc, fc
                    continue
            else:
                xc = np.clip(centroid + contract * (worst - centroid), lower, upper)
                fc = f(xc)
                if fc < values[-1]:
                    simplex[-1], values[-1] = xc, fc
                    continue
            for i in range(1, n + 1):
                simplex[i] = np.clip(simplex[0] + shrink * (simplex[i] - simplex[0]), lower, upper)
                values[i] = f(simplex[i])
    except BudgetExhausted:
        pass
    bx, bf = best()
    return bx, bf, history


@dataclass
class TuneReport:
    init: DenoiserParams
    best: DenoiserParams
    init_loss: float
    best_loss: float
    history: list = field(default_factory=list)

    @property
    def evaluations(self) -> int:
        return len(self.history)

    def to_json(self) -> dict:
        return {"init": self.init.to_dict(), "best": self.best.to_dict(),
                "init_loss": self.init_loss, "best_loss": self.best_loss,
                "history": [{"params": p, "loss": l} for p, l in self.history]}


def tune_denoiser(pairs: Sequence[tuple[np.ndarray, np.ndarray]], net: BackboneNet, init: DenoiserParams | None = None,
                  budget: int = 200, bounds: dict | None = None, fixed: Sequence[str] = (),
                  layer_tap: int = 2) -> TuneReport:
    """Minimize mean feature_content_loss(denoise(noisy), clean) over the pairs."""
    if not pairs:
        raise ConfigError("tune_denoiser needs at least one (noisy, clean) pair")
    if budget < MIN_BUDGET:
        raise ConfigError(f"tuning budget must be at least {MIN_BUDGET}, got {budget}")
    init = init or DenoiserParams()
    bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
    for name in fixed:
        if name not in PARAM_NAMES:
            raise ConfigError(f"unknown denoiser parameter {name!r}")
    free = [i for i, name in enumerate(PARAM_NAMES) if name not in fixed]
    base = init.as_vector()
    noisy = np.stack([np.asarray(p[0]) for p in pairs])
    clean = Tensor(np.stack([np.asarray(p[1]) for p in pairs]))
    clean_feats = backbone_features(clean, net, layer_tap).data.astype(np.float64)
    history = []

    def objective(sub: np.ndarray) -> float:
        full = base.copy()
        full[free] = sub
        params = DenoiserParams.from_vector(full)
        out = bilateral_denoise(noisy, params)
        feats = backbone_features(Tensor(out), net, layer_tap).data.astype(np.float64)
        loss = float(np.abs(feats - clean_feats).sum()) / len(pairs)
        history.append((params.to_dict(), loss))
        return loss

    lo = np.array([bounds[PARAM_NAMES[i]][0] for i in free])
    hi = np.array([bounds[PARAM_NAMES[i]][1] for i in free])
    best_sub, best_loss, _ = nelder_mead(objective, base[free], lo, hi, budget)
    full = base.copy()
    full[free] = best_sub
    return TuneReport(init, DenoiserParams.from_vector(full), history[0][1], best_loss, history)
