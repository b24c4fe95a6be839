"""Regenerate tests/golden: bypass-everything baseline weights and their AP.

Trains on 500 synthetic scenes for 30 epochs through the CLI, evaluates on a
fixed held-out set, and records the AP plus a +-0.05 acceptance range.

    python3 scripts/make_golden.py [--out tests/golden]
"""
import argparse
import shutil
import tempfile
from pathlib import Path

from visionisp.cli import main
from visionisp.fileio import read_json, write_json

TRAIN = {"count": 500, "seed": 0}
VAL = {"count": 200, "seed": 1000}
CONFIG = {"seed": 0, "train": {"epochs": 30}}
RANGE = 0.05


def run(*argv):
    code = main([str(a) for a in argv])
    if code:
        raise SystemExit(f"visionisp {argv[0]} failed with exit code {code}")


def regenerate(out: Path) -> dict:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        run("gen-data", "--out", tmp / "train", "--count", TRAIN["count"], "--seed", TRAIN["seed"])
        run("gen-data", "--out", tmp / "val", "--count", VAL["count"], "--seed", VAL["seed"])
        write_json(tmp / "config.json", CONFIG)
        run("train", "--config", tmp / "config.json", "--data", tmp / "train", "--val", tmp / "val",
            "--out", tmp / "weights")
        run("eval", "--weights", tmp / "weights", "--data", tmp / "val", "--out", tmp / "eval.json")
        ap = read_json(tmp / "eval.json")["ap"]
        history = read_json(tmp / "weights" / "history.json")["ap_history"]

        weights = out / "baseline"
        if weights.exists():
            shutil.rmtree(weights)
        shutil.copytree(tmp / "weights", weights)
        (weights / "manifest.json").unlink()
    golden = {"ap": ap, "range": [ap - RANGE, ap + RANGE], "ap_history": history,
              "train": TRAIN, "val": VAL, "config": CONFIG}
    write_json(out / "golden.json", golden)
    return golden


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "golden"))
    g = regenerate(Path(p.parse_args().out))
    print(f"golden AP {g['ap']:.6f}")
