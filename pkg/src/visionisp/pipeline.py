"""Pipeline configuration and the composed preprocessing + detector forward pass.

Block order: [denoiser] -> RGB->YCbCr -> [VLTM on Y] -> [TVS | bilinear] -> detector.
The denoiser has fixed parameters and runs outside the gradient tape.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .color import rgb_to_ycbcr, ycbcr_to_rgb
from .denoise import DenoiserParams, bilateral_denoise
from .detector import DEFAULT_WIDTHS, BackboneNet, backbone_logits, load_backbone, save_backbone
from .errors import ConfigError
from .fileio import ensure_dir, read_json, write_json
from .rng import substream
from .tensor import Tensor, bilinear_matrix, concat, separable_linear, take_channels
from .tvs import StridePlan, TvsParams, load_tvs, parse_factor, save_tvs, tvs_forward
from .vltm import VltmParams, clamp01, ste_quantize, vltm_forward

BIT_POLICIES = ("vltm_site", "tvs_output_site")

DEFAULT_CONFIG = {
    "seed": 0,
    "pipeline": {
        "in_bits": 8,
        "out_bits": 8,
        "bit_policy": "vltm_site",
        "denoiser": {"enabled": False, "sigma_spatial": 1.0, "sigma_range": 0.1, "blend": 0.5},
        "vltm": {"mode": "bypass", "gamma": 1.0, "alpha": 1.0, "window": 5, "frozen": False},
        "tvs": {"mode": "bypass", "k": 7, "n": 30, "factor": "2/1", "grouped": False, "frozen": False},
        "scaler": {"kind": "none", "factor": "2/1"},
    },
    "backbone": {"widths": list(DEFAULT_WIDTHS), "grid": 6},
    "train": {"epochs": 30, "lr": 0.05, "batch": 8, "vltm_lr_scale": 1.0, "tvs_lr_scale": 1.0},
    "init": {"weights": None, "load": []},
}

_ENUMS = {
    "/pipeline/bit_policy": BIT_POLICIES,
    "/pipeline/vltm/mode": ("bypass", "enable"),
    "/pipeline/tvs/mode": ("bypass", "enable"),
    "/pipeline/scaler/kind": ("none", "bilinear"),
}
_LOADABLE = ("vltm", "tvs", "backbone")


def _merge(default, given, pointer: str):
    if not isinstance(given, dict):
        raise ConfigError(f"expected an object, got {type(given).__name__}", pointer or "/")
    out = {}
    for key in given:
        if key not in default:
            raise ConfigError(f"unknown key {key!r}", f"{pointer}/{key}")
    for key, dval in default.items():
        ptr = f"{pointer}/{key}"
        if key not in given:
            out[key] = copy.deepcopy(dval)
            continue
        val = given[key]
        if isinstance(dval, dict):
            out[key] = _merge(dval, val, ptr)
        elif isinstance(dval, bool):
            if not isinstance(val, bool):
                raise ConfigError("expected a boolean", ptr)
            out[key] = val
        elif isinstance(dval, int) and not isinstance(dval, bool) and key not in ("gamma", "alpha"):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError("expected an integer", ptr)
            out[key] = val
        elif isinstance(dval, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError("expected a number", ptr)
            out[key] = float(val)
        elif isinstance(dval, list):
            if not isinstance(val, list):
                raise ConfigError("expected a list", ptr)
            out[key] = list(val)
        elif dval is None:
            out[key] = val
        else:
            if not isinstance(val, type(dval)):
                raise ConfigError(f"expected {type(dval).__name__}", ptr)
            out[key] = val
    return out


@dataclass
class PipelineConfig:
    """Validated, fully resolved experiment configuration (see DEFAULT_CONFIG)."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG))

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "PipelineConfig":
        cfg = _merge(DEFAULT_CONFIG, d or {}, "")
        cls._validate(cfg)
        return cls(cfg)

    @staticmethod
    def _validate(cfg: dict) -> None:
        for ptr, allowed in _ENUMS.items():
            node = cfg
            for part in ptr.strip("/").split("/"):
                node = node[part]
            if node not in allowed:
                raise ConfigError(f"must be one of {list(allowed)}, got {node!r}", ptr)
        p = cfg["pipeline"]
        if not 1 <= p["out_bits"] <= 8 or p["out_bits"] > p["in_bits"] or p["in_bits"] > 16:
            raise ConfigError("need 1 <= out_bits <= min(8, in_bits) and in_bits <= 16", "/pipeline/out_bits")
        if cfg["seed"] < 0:
            raise ConfigError("seed must be non-negative", "/seed")
        tvs_on = p["tvs"]["mode"] == "enable"
        if tvs_on and p["scaler"]["kind"] != "none":
            raise ConfigError("TVS and a baseline scaler cannot both be active", "/pipeline/scaler")
        if p["bit_policy"] == "tvs_output_site" and not (tvs_on and p["vltm"]["mode"] == "enable"):
            raise ConfigError("tvs_output_site requires both VLTM and TVS enabled", "/pipeline/bit_policy")
        try:
            DenoiserParams(p["denoiser"]["sigma_spatial"], p["denoiser"]["sigma_range"], p["denoiser"]["blend"])
        except ConfigError as exc:
            raise ConfigError(str(exc), "/pipeline/denoiser") from None
        if p["vltm"]["window"] < 1 or p["vltm"]["window"] % 2 == 0:
            raise ConfigError("window must be odd and positive", "/pipeline/vltm/window")
        if p["vltm"]["gamma"] <= 0:
            raise ConfigError("gamma must be positive", "/pipeline/vltm/gamma")
        for key in ("tvs", "scaler"):
            try:
                plan = parse_factor(p[key]["factor"])
            except ConfigError as exc:
                raise ConfigError(str(exc), f"/pipeline/{key}/factor") from None
        t = p["tvs"]
        if t["k"] < 1 or t["k"] % 2 == 0:
            raise ConfigError("kernel size must be odd", "/pipeline/tvs/k")
        if tvs_on and parse_factor(t["factor"]).factor > t["k"] - 1:
            raise ConfigError("factor exceeds K-1", "/pipeline/tvs/factor")
        if t["grouped"] and t["n"] % 3:
            raise ConfigError("grouped fusion needs n divisible by 3", "/pipeline/tvs/n")
        b = cfg["backbone"]
        if len(b["widths"]) != 3 or not all(isinstance(w, int) and w > 0 for w in b["widths"]):
            raise ConfigError("widths must be three positive integers", "/backbone/widths")
        tr = cfg["train"]
        if tr["lr"] < 0:
            raise ConfigError("learning rate must be non-negative", "/train/lr")
        if tr["batch"] < 1 or tr["epochs"] < 0:
            raise ConfigError("batch must be >= 1 and epochs >= 0", "/train")
        for i, name in enumerate(cfg["init"]["load"]):
            if name not in _LOADABLE:
                raise ConfigError(f"can only load {list(_LOADABLE)}", f"/init/load/{i}")
        if cfg["init"]["load"] and not cfg["init"]["weights"]:
            raise ConfigError("init.load requires init.weights", "/init/weights")

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def replace(self, **overrides) -> "PipelineConfig":
        """Overrides use dotted paths, e.g. ``replace(**{"pipeline.out_bits": 4})``."""
        d = self.to_dict()
        for path, val in overrides.items():
            node = d
            parts = path.split(".")
            for part in parts[:-1]:
                node = node[part]
            node[parts[-1]] = val
        return PipelineConfig.from_dict(d)

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def p(self) -> dict:
        return self.raw["pipeline"]

    @property
    def vltm_on(self) -> bool:
        return self.p["vltm"]["mode"] == "enable"

    @property
    def tvs_on(self) -> bool:
        return self.p["tvs"]["mode"] == "enable"

    @property
    def scaler_on(self) -> bool:
        return self.p["scaler"]["kind"] == "bilinear"

    @property
    def downscaling(self) -> bool:
        return self.tvs_on or self.scaler_on

    @property
    def denoiser(self) -> DenoiserParams | None:
        d = self.p["denoiser"]
        return DenoiserParams(d["sigma_spatial"], d["sigma_range"], d["blend"]) if d["enabled"] else None


def parse_variant(name: str, base: PipelineConfig, bits: int = 4) -> PipelineConfig:
    """Table-style variant names: "[Nbit:]" + "+"-joined blocks from {bypass, vltm, tvs}.

    Without "tvs" the input is downscaled bilinearly by the TVS factor.
    Joint vltm+tvs runs quantize at the TVS output.
    """
    out_bits = 8
    body = name
    if ":" in name:
        head, body = name.split(":", 1)
        if not head.endswith("bit"):
            raise ConfigError(f"bad variant prefix {head!r}", "/sweep")
        out_bits = int(head[:-3])
    blocks = set(body.split("+"))
    unknown = blocks - {"bypass", "vltm", "tvs"}
    if unknown:
        raise ConfigError(f"unknown blocks {sorted(unknown)} in variant {name!r}", "/sweep")
    vltm_on, tvs_on = "vltm" in blocks, "tvs" in blocks
    factor = base.p["tvs"]["factor"]
    d = base.to_dict()
    p = d["pipeline"]
    p["out_bits"] = out_bits
    p["vltm"]["mode"] = "enable" if vltm_on else "bypass"
    p["tvs"]["mode"] = "enable" if tvs_on else "bypass"
    p["scaler"] = {"kind": "none", "factor": factor} if tvs_on else {"kind": "bilinear", "factor": factor}
    p["bit_policy"] = "tvs_output_site" if (vltm_on and tvs_on) else "vltm_site"
    return PipelineConfig.from_dict(d)


@dataclass
class Pipeline:
    config: PipelineConfig
    backbone: BackboneNet
    vltm: VltmParams | None = None
    tvs: TvsParams | None = None

    @classmethod
    def build(cls, config: PipelineConfig, dtype=np.float32) -> "Pipeline":
        rng = substream(config.seed, "init")
        p = config.p
        tvs = vltm = None
        if config.tvs_on:
            t = p["tvs"]
            tvs = TvsParams.create(rng, t["k"], t["n"], t["factor"], t["grouped"], dtype=dtype)
        if config.vltm_on:
            v = p["vltm"]
            vltm = VltmParams(gamma=v["gamma"], alpha=v["alpha"], window=v["window"], out_bits=p["out_bits"],
                              in_bits=p["in_bits"])
            for t in vltm.params:
                t.data = t.data.astype(dtype)
        b = config.raw["backbone"]
        net = BackboneNet.create(rng, tuple(b["widths"]), 1 if config.downscaling else 2, b["grid"], dtype=dtype,
                                 offset=0.0 if config.tvs_on else 0.5)
        pipe = cls(config, net, vltm, tvs)
        init = config.raw["init"]
        if init["load"]:
            pipe.load_blocks(init["weights"], init["load"])
        return pipe

    def load_blocks(self, directory, blocks) -> None:
        d = Path(directory)
        if "tvs" in blocks:
            if self.tvs is None:
                raise ConfigError("cannot load TVS weights into a pipeline with TVS bypassed", "/init/load")
            loaded = load_tvs(d, dtype=self.tvs.color.weight.dtype)
            t = self.config.p["tvs"]
            if loaded.extract.weight.shape != self.tvs.extract.weight.shape or loaded.grouped != t["grouped"]:
                raise ConfigError(f"TVS weights in {d} do not match k={t['k']}, n={t['n']}", "/pipeline/tvs")
            self.tvs = loaded.with_plan(parse_factor(self.config.p["tvs"]["factor"]))
        if "vltm" in blocks:
            if self.vltm is None:
                raise ConfigError("cannot load VLTM parameters with VLTM bypassed", "/init/load")
            v = read_json(d / "vltm.json")
            self.vltm.gamma.data[...] = v["gamma"]
            self.vltm.alpha.data[...] = v["alpha"]
        if "backbone" in blocks:
            net = load_backbone(d, dtype=self.backbone.stages[0].weight.dtype)
            shapes = [layer.weight.shape for layer in net.stages + [net.head]]
            if shapes != [layer.weight.shape for layer in self.backbone.stages + [self.backbone.head]] \
                    or net.grid != self.backbone.grid:
                raise ConfigError(f"backbone weights in {d} do not match the configured widths/grid", "/backbone")
            self.backbone = net.with_first_stride(self.backbone.first_stride).with_offset(self.backbone.offset)

    def trainable(self) -> list[tuple[Tensor, float]]:
        """(parameter, learning-rate multiplier) for every non-frozen parameter."""
        tr = self.config.raw["train"]
        out = [(t, 1.0) for t in self.backbone.params]
        if self.vltm is not None and not self.config.p["vltm"]["frozen"]:
            out += [(t, tr["vltm_lr_scale"]) for t in self.vltm.params]
        if self.tvs is not None and not self.config.p["tvs"]["frozen"]:
            out += [(t, tr["tvs_lr_scale"]) for t in self.tvs.params]
        return out

    def project(self) -> None:
        if self.vltm is not None:
            self.vltm.project()

    def denoise(self, images: np.ndarray) -> np.ndarray:
        params = self.config.denoiser
        return bilateral_denoise(images, params) if params is not None else images

    def preprocess(self, x: Tensor, surrogate: bool = False, taps: dict | None = None) -> Tensor:
        """Differentiable part of the ISP path; returns the detector input."""
        cfg = self.config
        p = cfg.p
        in_bits, out_bits = p["in_bits"], p["out_bits"]
        uniform = not cfg.vltm_on and out_bits < in_bits
        if cfg.vltm_on or uniform or cfg.tvs_on:
            ycc = rgb_to_ycbcr(x)
            y = clamp01(take_channels(ycc, 0, 1))
            plane = None
            if cfg.vltm_on:
                plane, y = vltm_forward(y, self.vltm, quantize=p["bit_policy"] == "vltm_site", surrogate=surrogate)
            elif uniform:
                plane, y = ste_quantize(y, in_bits, out_bits, surrogate=surrogate)
            if taps is not None and plane is not None:
                taps["plane"] = plane
            x = concat([y, take_channels(ycc, 1, 3)])
            if cfg.tvs_on:
                bits = out_bits if p["bit_policy"] == "tvs_output_site" else None
                return tvs_forward(x, self.tvs, out_bits=bits, in_bits=in_bits, surrogate=surrogate, taps=taps)
            x = ycbcr_to_rgb(x)
        if cfg.scaler_on:
            x = bilinear_resize(x, parse_factor(p["scaler"]["factor"]))
        if taps is not None:
            taps["transmitted"] = x
        return x

    def logits(self, x: Tensor, surrogate: bool = False) -> Tensor:
        return backbone_logits(self.preprocess(x, surrogate), self.backbone)

    def save(self, directory) -> None:
        d = ensure_dir(directory)
        write_json(d / "config.json", self.config.to_dict())
        save_backbone(d, self.backbone)
        if self.tvs is not None:
            save_tvs(d, self.tvs)
        if self.vltm is not None:
            write_json(d / "vltm.json", self.vltm.to_dict())

    @classmethod
    def load(cls, directory, dtype=np.float32) -> "Pipeline":
        d = Path(directory)
        cfg_raw = read_json(d / "config.json")
        cfg_raw["init"] = {"weights": None, "load": []}
        config = PipelineConfig.from_dict(cfg_raw)
        pipe = cls.build(config, dtype)
        pipe.load_blocks(d, [b for b in _LOADABLE if getattr(pipe, b) is not None])
        return pipe


def bilinear_resize(x: Tensor, plan: StridePlan) -> Tensor:
    """Bilinear downscale by ``plan.factor``; output extent matches the plan's point count."""
    f = float(plan.factor)
    h, w = x.shape[2], x.shape[3]
    rows = bilinear_matrix(h, plan.output_extent(h), f)
    cols = bilinear_matrix(w, plan.output_extent(w), f)
    return separable_linear(x, rows, cols, op="bilinear")
