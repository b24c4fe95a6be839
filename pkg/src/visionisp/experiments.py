"""Experiment drivers for the trend analogues on the synthetic task.

Every driver returns a :class:`Finding` with the per-seed numbers it used.
Training runs are memoised per process, so drivers that share a run (the
joint TVS model is reused by the transfer experiments) train it once.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .denoise import DenoiserParams, NoiseSpec, inject_noise, tune_denoiser
from .pipeline import Pipeline, PipelineConfig, parse_variant
from .scenes import SceneSet, make_scene_set
from .train import TrainResult, train_end_to_end
from .tvs import parse_factor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scale:
    """Dataset and schedule size shared by all runs of an experiment."""

    n_train: int = 400
    n_val: int = 200
    epochs: int = 20
    size: int = 96
    grid: int = 6


@dataclass
class Finding:
    name: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.summary}"


def worker_count() -> int:
    env = os.environ.get("VISIONISP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer VISIONISP_THREADS=%r", env)
    return os.cpu_count() or 1


def sign_test_p(wins: int, n: int) -> float:
    """One-sided P(X >= wins) for X ~ Binomial(n, 1/2)."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n


# ---------------------------------------------------------------- data


@lru_cache(maxsize=32)
def scene_split(seed: int, scale: Scale) -> tuple[SceneSet, SceneSet]:
    train = make_scene_set(seed, scale.n_train, scale.size, scale.grid)
    val = make_scene_set(seed, scale.n_val, scale.size, scale.grid, start=scale.n_train)
    return train, val


@lru_cache(maxsize=32)
def noisy_split(seed: int, scale: Scale, variance: float) -> tuple[SceneSet, SceneSet]:
    train, val = scene_split(seed, scale)
    spec = NoiseSpec(variance, seed)
    return (SceneSet(inject_noise(train.images, spec, stream=0), train.labels),
            SceneSet(inject_noise(val.images, spec, stream=1), val.labels))


def _data(seed: int, scale: Scale, variance: float | None):
    return scene_split(seed, scale) if variance is None else noisy_split(seed, scale, variance)


# ---------------------------------------------------------------- runs

_RUNS: dict[str, TrainResult] = {}


def config_for(seed: int, scale: Scale, overrides: dict | None = None, variant: str | None = None) -> PipelineConfig:
    d = {"seed": seed, "train": {"epochs": scale.epochs}, "backbone": {"grid": scale.grid}}
    base = PipelineConfig.from_dict(_deep_update(d, overrides or {}))
    return parse_variant(variant, base) if variant else base


def _deep_update(a: dict, b: dict) -> dict:
    out = copy.deepcopy(a)
    for k, v in b.items():
        out[k] = _deep_update(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _key(config: PipelineConfig, variance, tag: str) -> str:
    return json.dumps({"config": config.to_dict(), "noise": variance, "tag": tag}, sort_keys=True)


def _train(config: PipelineConfig, scale: Scale, variance, pipeline: Pipeline | None = None) -> TrainResult:
    train, val = _data(config.seed, scale, variance)
    return train_end_to_end(config, train, val, pipeline=pipeline)


def run(config: PipelineConfig, scale: Scale, variance: float | None = None, pipeline: Pipeline | None = None,
        tag: str = "") -> TrainResult:
    """Train (or fetch from the session cache) one configuration.

    ``tag`` must identify any custom ``pipeline`` passed in, since the cache
    key is otherwise just the config and the data.
    """
    key = _key(config, variance, tag)
    if key not in _RUNS:
        log.info("training %s", key)
        _RUNS[key] = _train(config, scale, variance, pipeline)
    return _RUNS[key]


def _job(args):
    config_dict, scale, variance = args
    return _train(PipelineConfig.from_dict(config_dict), scale, variance)


def prefetch(configs, scale: Scale, variance: float | None = None) -> None:
    """Train independent plain configurations in a process pool when workers > 1."""
    todo = [c for c in configs if _key(c, variance, "") not in _RUNS]
    workers = min(worker_count(), len(todo))
    if workers <= 1:
        return
    with ProcessPoolExecutor(workers) as pool:
        results = pool.map(_job, [(c.to_dict(), scale, variance) for c in todo])
        for c, r in zip(todo, results):
            _RUNS[_key(c, variance, "")] = r


def clear_cache() -> None:
    _RUNS.clear()


def final_ap(result: TrainResult) -> float:
    return result.ap_history[-1]


# ---------------------------------------------------------------- drivers


def vltm_bits_trend(seeds=range(5), scale: Scale = Scale(), low_bits: int = 2, margin: float = 0.03) -> Finding:
    """VLTM versus the uniform bit shift at ``low_bits``, and the same gap at 8 bits."""
    arms = {
        "vltm_low": {"pipeline": {"out_bits": low_bits, "vltm": {"mode": "enable"}}},
        "uniform_low": {"pipeline": {"out_bits": low_bits}},
        "vltm_8": {"pipeline": {"vltm": {"mode": "enable"}}},
        "bypass_8": {},
    }
    cfgs = {(s, a): config_for(s, scale, o) for s in seeds for a, o in arms.items()}
    prefetch(cfgs.values(), scale)
    ap = {a: [final_ap(run(cfgs[s, a], scale)) for s in seeds] for a in arms}
    gap_low = float(np.mean(ap["vltm_low"]) - np.mean(ap["uniform_low"]))
    gap_8 = float(np.mean(ap["vltm_8"]) - np.mean(ap["bypass_8"]))
    passed = gap_low >= margin and gap_low > gap_8
    return Finding("vltm_bits_trend", passed,
                   f"gap@{low_bits}bit={gap_low:+.4f} (need >= {margin}), gap@8bit={gap_8:+.4f}",
                   {"ap": ap, "gap_low": gap_low, "gap_8": gap_8})


def tvs_vs_bilinear(seeds=range(5), scale: Scale = Scale(), alpha: float = 0.1) -> Finding:
    """TVS x2 against bilinear x2, paired one-sided sign test over seeds."""
    cfgs = {(s, v): config_for(s, scale, variant=v) for s in seeds for v in ("tvs", "bypass")}
    prefetch(cfgs.values(), scale)
    tvs = [final_ap(run(cfgs[s, "tvs"], scale)) for s in seeds]
    bil = [final_ap(run(cfgs[s, "bypass"], scale)) for s in seeds]
    wins = sum(t > b for t, b in zip(tvs, bil))
    p = sign_test_p(wins, len(tvs))
    passed = float(np.mean(tvs)) > float(np.mean(bil)) and p < alpha
    return Finding("tvs_vs_bilinear", passed,
                   f"mean TVS={np.mean(tvs):.4f} bilinear={np.mean(bil):.4f}, wins {wins}/{len(tvs)}, p={p:.4f}",
                   {"tvs": tvs, "bilinear": bil, "wins": wins, "p": p})


def denoise_trend(seeds=range(3), scale: Scale = Scale(), variances=(0.06, 0.18), budget: int = 60,
                  n_pairs: int = 8) -> Finding:
    """Feature-loss-tuned denoiser against no denoising, at two noise levels.

    The tuning net is the detector trained on clean data; the tuned
    parameters are then fixed while a fresh pipeline is trained on noisy data.
    """
    out = {v: {"off": [], "on": [], "params": []} for v in variances}
    for s in seeds:
        clean_net = run(config_for(s, scale), scale).pipeline.backbone
        for v in variances:
            train_noisy, _ = noisy_split(s, scale, v)
            train_clean, _ = scene_split(s, scale)
            pairs = [(train_noisy.images[i], train_clean.images[i]) for i in range(n_pairs)]
            report = tune_denoiser(pairs, clean_net, budget=budget)
            p = report.best
            on_cfg = config_for(s, scale, {"pipeline": {"denoiser": {"enabled": True, **p.to_dict()}}})
            out[v]["off"].append(final_ap(run(config_for(s, scale), scale, variance=v)))
            out[v]["on"].append(final_ap(run(on_cfg, scale, variance=v)))
            out[v]["params"].append(p.to_dict())
    rel = {}
    for v in variances:
        off, on = float(np.mean(out[v]["off"])), float(np.mean(out[v]["on"]))
        rel[v] = (on - off) / off
    hi, lo = max(variances), min(variances)
    passed = float(np.mean(out[hi]["on"])) > float(np.mean(out[hi]["off"])) and rel[hi] > rel[lo]
    summary = ", ".join(f"var {v}: off={np.mean(out[v]['off']):.4f} on={np.mean(out[v]['on']):.4f} "
                        f"rel={rel[v]:+.3f}" for v in variances)
    return Finding("denoise_trend", passed, summary, {"runs": {str(k): v for k, v in out.items()},
                                                       "relative": {str(k): v for k, v in rel.items()}})


def _frozen_tvs_pipeline(config: PipelineConfig, source: Pipeline, plan=None) -> Pipeline:
    pipe = Pipeline.build(config)
    tvs = copy.deepcopy(source.tvs)
    pipe.tvs = tvs.with_plan(plan) if plan is not None else tvs
    return pipe


def frozen_transfer(seeds=range(3), scale: Scale = Scale(), widths_b=(24, 24, 48), tolerance: float = 0.05) -> Finding:
    """TVS trained with backbone A, frozen, and a fresh backbone B trained on top.

    The reference is TVS trained jointly with backbone B.
    """
    frozen, joint = [], []
    for s in seeds:
        src = run(config_for(s, scale, variant="tvs"), scale)
        b_over = {"backbone": {"widths": list(widths_b)}}
        cfg_frozen = config_for(s, scale, _deep_update(b_over, {"pipeline": {"tvs": {"frozen": True}}}), "tvs")
        pipe = _frozen_tvs_pipeline(cfg_frozen, src.pipeline)
        frozen.append(final_ap(run(cfg_frozen, scale, pipeline=pipe, tag=f"frozen-from-A-seed{s}")))
        joint.append(final_ap(run(config_for(s, scale, b_over, "tvs"), scale)))
    loss = float(np.mean(joint) - np.mean(frozen))
    return Finding("frozen_transfer", loss <= tolerance,
                   f"joint B={np.mean(joint):.4f} frozen-A-TVS + B={np.mean(frozen):.4f}, loss={loss:+.4f} "
                   f"(need <= {tolerance})", {"joint": joint, "frozen": frozen, "loss": loss})


def scaling_transfer(seeds=range(3), scale: Scale = Scale(), factor: str = "5/2", min_wins: int = 2) -> Finding:
    """TVS trained at x2, re-planned to ``factor`` with frozen weights, backbone retrained."""
    tvs_ap, bil_ap = [], []
    plan = parse_factor(factor)
    for s in seeds:
        src = run(config_for(s, scale, variant="tvs"), scale)
        over = {"pipeline": {"tvs": {"factor": factor, "frozen": True}}}
        cfg = config_for(s, scale, over, "tvs")
        pipe = _frozen_tvs_pipeline(cfg, src.pipeline, plan)
        tvs_ap.append(final_ap(run(cfg, scale, pipeline=pipe, tag=f"replanned-from-x2-seed{s}")))
        bil_ap.append(final_ap(run(config_for(s, scale, {"pipeline": {"tvs": {"factor": factor}}}, "bypass"), scale)))
    wins = sum(t > b for t, b in zip(tvs_ap, bil_ap))
    return Finding("scaling_transfer", wins >= min_wins,
                   f"x{float(plan.factor):g}: TVS wins {wins}/{len(tvs_ap)} (need >= {min_wins}); "
                   f"mean TVS={np.mean(tvs_ap):.4f} bilinear={np.mean(bil_ap):.4f}",
                   {"tvs": tvs_ap, "bilinear": bil_ap, "wins": wins})


def joint_lowbit_trend(seeds=range(5), scale: Scale = Scale(), bits: int = 4) -> Finding:
    """Joint VLTM+TVS at ``bits`` against bilinear x2 plus uniform quantization."""
    names = (f"{bits}bit:vltm+tvs", f"{bits}bit:bypass")
    cfgs = {(s, v): config_for(s, scale, variant=v) for s in seeds for v in names}
    prefetch(cfgs.values(), scale)
    joint = [final_ap(run(cfgs[s, names[0]], scale)) for s in seeds]
    base = [final_ap(run(cfgs[s, names[1]], scale)) for s in seeds]
    passed = float(np.mean(joint)) > float(np.mean(base))
    return Finding("joint_lowbit_trend", passed, f"mean {names[0]}={np.mean(joint):.4f} {names[1]}={np.mean(base):.4f}",
                   {"joint": joint, "baseline": base})
