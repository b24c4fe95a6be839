"""Command-line entry point: ``visionisp <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 input/output error,
4 numeric error. Every command that writes a directory also writes a
``manifest.json`` from which the run can be replayed with ``rerun``.
"""
from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .denoise import MIN_BUDGET, NoiseSpec, inject_noise, tune_denoiser
from .detector import load_backbone
from .errors import ConfigError, InputError, VisionIspError
from .fileio import ensure_dir, image_to_u8, read_json, read_ppm, u8_to_image, write_json, write_pgm, write_ppm
from .pipeline import Pipeline, PipelineConfig, parse_variant
from .scenes import SceneSet, gen_synthetic_scene, load_dataset, save_dataset
from .tensor import Tensor
from .train import evaluate, train_end_to_end
from .tvs import pseudo_color

log = logging.getLogger("visionisp")

MANIFEST = "manifest.json"


def _versions() -> dict:
    return {"visionisp": __version__, "numpy": np.__version__}


def write_manifest(out: Path, command: str, args: dict, config=None, seed=None) -> None:
    """Everything needed to replay ``command``; paths of outputs are relative to ``out``."""
    artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != MANIFEST)
    write_json(out / MANIFEST, {"command": command, "args": args, "config": config, "seed": seed,
                                "artifacts": artifacts, "versions": _versions()})


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", name).strip("-")


# ---------------------------------------------------------------- commands


def cmd_gen_data(a) -> None:
    if a.count < 0:
        raise ConfigError("--count must be non-negative", "/count")
    if a.seed < 0:
        raise ConfigError("--seed must be non-negative", "/seed")
    if a.size % a.grid:
        raise ConfigError(f"--size {a.size} must be a multiple of --grid {a.grid}", "/size")
    out = ensure_dir(a.out)
    scenes = [gen_synthetic_scene(a.seed, a.size, a.grid, index=i) for i in range(a.count)]
    save_dataset(out, scenes, a.grid)
    args = {"count": a.count, "seed": a.seed, "size": a.size, "grid": a.grid}
    write_manifest(out, "gen-data", args, seed=a.seed)
    log.info("wrote %d scenes to %s", a.count, out)


def _split(data: SceneSet, val_dir) -> tuple[SceneSet, SceneSet]:
    if val_dir:
        return data, load_dataset(val_dir)
    n_val = max(1, len(data) // 5)
    if len(data) - n_val < 1:
        raise InputError("need at least two scenes to hold out a validation split")
    idx = np.arange(len(data))
    return data.subset(idx[:-n_val]), data.subset(idx[-n_val:])


def _train_one(config: PipelineConfig, train: SceneSet, val: SceneSet, out: Path) -> dict:
    if train.grid != config.raw["backbone"]["grid"]:
        raise ConfigError(f"dataset grid {train.grid} != backbone grid {config.raw['backbone']['grid']}",
                          "/backbone/grid")
    res = train_end_to_end(config, train, val)
    res.pipeline.save(out)
    history = {"config": config.to_dict(), "seed": config.seed, "ap_history": res.ap_history,
               "loss_history": res.loss_history}
    write_json(out / "history.json", history)
    return history


def cmd_train(a, config_dict: dict | None = None) -> None:
    raw = config_dict if config_dict is not None else read_json(a.config)
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", "/")
    raw = dict(raw)
    sweep = raw.pop("sweep", None)
    base = PipelineConfig.from_dict(raw)
    data = load_dataset(a.data)
    train, val = _split(data, a.val)
    out = ensure_dir(a.out)
    args = {"config": str(a.config) if a.config else None, "data": str(a.data),
            "val": str(a.val) if a.val else None}
    if sweep is None:
        _train_one(base, train, val, out)
        write_manifest(out, "train", args, base.to_dict(), base.seed)
        return
    if not isinstance(sweep, list) or not sweep:
        raise ConfigError("sweep must be a non-empty list of variant names", "/sweep")
    configs = []
    for i, name in enumerate(sweep):
        if not isinstance(name, str):
            raise ConfigError("variant names must be strings", f"/sweep/{i}")
        try:
            configs.append((name, parse_variant(name, base)))
        except ConfigError as exc:
            raise ConfigError(str(exc), f"/sweep/{i}") from None
    summary = []
    for name, cfg in configs:
        sub = ensure_dir(out / _slug(name))
        hist = _train_one(cfg, train, val, sub)
        write_json(sub / "result.json", {"variant": name, "config": hist["config"], "seed": hist["seed"],
                                         "ap_history": hist["ap_history"]})
        summary.append({"variant": name, "final_ap": hist["ap_history"][-1] if hist["ap_history"] else None})
        log.info("%s: final AP %s", name, summary[-1]["final_ap"])
    write_json(out / "sweep.json", summary)
    write_manifest(out, "train", args, {**base.to_dict(), "sweep": sweep}, base.seed)


def _read_pairs(directory) -> list[tuple[str, np.ndarray, np.ndarray]]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{directory}: not a directory")
    noisy = {p.name[: -len("_noisy.ppm")]: p for p in d.glob("*_noisy.ppm")}
    clean = {p.name[: -len("_clean.ppm")]: p for p in d.glob("*_clean.ppm")}
    missing = sorted([f"{k}_clean.ppm" for k in noisy.keys() - clean.keys()] +
                     [f"{k}_noisy.ppm" for k in clean.keys() - noisy.keys()])
    if missing:
        raise InputError(f"unmatched pairs in {directory}; missing: {', '.join(missing)}")
    if not noisy:
        raise InputError(f"{directory}: no *_noisy.ppm / *_clean.ppm pairs")
    return [(k, u8_to_image(read_ppm(noisy[k])), u8_to_image(read_ppm(clean[k]))) for k in sorted(noisy)]


def _read_clean(directory) -> list[np.ndarray]:
    d = Path(directory)
    files = sorted(d.glob("*_clean.ppm")) or sorted(d.glob("*.ppm"))
    if not files:
        raise InputError(f"{directory}: no PPM images to use as clean references")
    return [u8_to_image(read_ppm(f)) for f in files]


def cmd_tune(a) -> None:
    if a.budget < MIN_BUDGET:
        raise ConfigError(f"--budget must be at least {MIN_BUDGET}, got {a.budget}", "/budget")
    net = load_backbone(a.net)
    out = ensure_dir(a.out)
    args = {"pairs": str(a.pairs), "net": str(a.net), "budget": a.budget, "inject": a.inject, "seed": a.seed}
    if a.inject:
        clean = _read_clean(a.pairs)
        for v in a.inject:
            if v < 0:
                raise ConfigError("noise variances must be non-negative", "/inject")
            pairs = [(inject_noise(c, NoiseSpec(v, a.seed), stream=i), c) for i, c in enumerate(clean)]
            rep = tune_denoiser(pairs, net, budget=a.budget)
            write_json(out / f"report_var{v:g}.json", {"variance": v, **rep.to_json()})
            log.info("variance %g: loss %.4f -> %.4f", v, rep.init_loss, rep.best_loss)
    else:
        pairs = [(n, c) for _, n, c in _read_pairs(a.pairs)]
        rep = tune_denoiser(pairs, net, budget=a.budget)
        write_json(out / "report.json", rep.to_json())
        log.info("loss %.4f -> %.4f", rep.init_loss, rep.best_loss)
    write_manifest(out, "tune", args, seed=a.seed)


def _load_pipeline(weights) -> Pipeline:
    d = Path(weights)
    if not (d / "config.json").exists():
        raise InputError(f"{weights}: no config.json; not a weights directory")
    try:
        return Pipeline.load(d)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"weights in {weights} do not match their config: {exc}") from None


def _run_image(pipe: Pipeline, path) -> tuple[Tensor, dict]:
    img = u8_to_image(read_ppm(path))[None]
    x = Tensor(pipe.denoise(img))
    taps: dict = {}
    out = pipe.preprocess(x, taps=taps)
    return out, taps


def cmd_process(a) -> None:
    pipe = _load_pipeline(a.weights)
    out, taps = _run_image(pipe, a.inp)
    if a.viz:
        write_ppm(a.out, pseudo_color(out))
    else:
        # the transmitted signal: before zero-mean normalization when TVS is on
        write_ppm(a.out, image_to_u8(taps["transmitted"].data))
    if a.plane:
        plane = taps.get("plane")
        if plane is None:
            raise ConfigError("--plane needs a pipeline that reduces bit depth", "/pipeline/out_bits")
        # channels are stacked vertically so one PGM holds the whole plane
        v = plane.values[0]
        write_pgm(a.plane, v.reshape(-1, v.shape[-1]), plane.bits)


def cmd_viz(a) -> None:
    pipe = _load_pipeline(a.weights)
    out, _ = _run_image(pipe, a.inp)
    write_ppm(a.out, pseudo_color(out))


def cmd_eval(a) -> None:
    pipe = _load_pipeline(a.weights)
    data = load_dataset(a.data)
    if data.grid != pipe.backbone.grid:
        raise ConfigError(f"dataset grid {data.grid} != backbone grid {pipe.backbone.grid}", "/backbone/grid")
    ap = evaluate(pipe, data)
    report = {"ap": ap, "scenes": len(data), "weights": str(a.weights), "data": str(a.data)}
    if a.out:
        write_json(a.out, report)
    print(f"{ap:.6f}")


def cmd_rerun(a) -> None:
    man = read_json(a.manifest)
    cmd = man.get("command")
    args = argparse.Namespace(**man["args"], out=a.out, verbose=0)
    if cmd == "gen-data":
        cmd_gen_data(args)
    elif cmd == "tune":
        cmd_tune(args)
    elif cmd == "train":
        cmd_train(args, config_dict=man["config"])
        # the replay's manifest must name the same inputs as the original
        write_json(Path(a.out) / MANIFEST, {**read_json(Path(a.out) / MANIFEST), "args": man["args"]})
    else:
        raise ConfigError(f"cannot replay command {cmd!r}", "/command")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="visionisp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic detection dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=96)
    g.add_argument("--grid", type=int, default=6)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a pipeline (or a sweep of variants)")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--val", help="validation dataset (default: hold out the last fifth of --data)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("tune", help="tune the denoiser on a feature-space loss")
    u.add_argument("--pairs", required=True, help="directory of NAME_noisy.ppm / NAME_clean.ppm pairs")
    u.add_argument("--net", required=True, help="weights directory holding backbone.json")
    u.add_argument("--budget", type=int, default=200)
    u.add_argument("--out", required=True)
    u.add_argument("--inject", type=float, nargs="+",
                   help="treat --pairs images as clean and inject noise at each variance")
    u.add_argument("--seed", type=int, default=0)
    u.set_defaults(func=cmd_tune)

    for name, func, hlp in (("process", cmd_process, "run the frozen pipeline on one image"),
                            ("viz", cmd_viz, "write the pseudo-colour view of the pipeline output")):
        q = sub.add_parser(name, help=hlp)
        q.add_argument("--in", dest="inp", required=True)
        q.add_argument("--weights", required=True)
        q.add_argument("--out", required=True)
        if name == "process":
            q.add_argument("--viz", action="store_true")
            q.add_argument("--plane", help="also write the bit-reduced plane as PGM")
        q.set_defaults(func=func)

    e = sub.add_parser("eval", help="average precision of trained weights on a dataset")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rerun", help="replay a run from its manifest.json")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(a.verbose, 2), format="%(levelname)s %(message)s")
    try:
        a.func(a)
    except VisionIspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
