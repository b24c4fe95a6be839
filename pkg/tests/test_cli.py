from pathlib import Path

import numpy as np
import pytest

from visionisp.cli import main
from visionisp.fileio import read_json, read_pgm, read_ppm, write_json, write_ppm
from visionisp.pipeline import Pipeline, PipelineConfig, parse_variant
from visionisp.scenes import gen_synthetic_scene

GOLDEN = Path(__file__).parent / "golden"


def run(*argv):
    return main([str(a) for a in argv])


def tree(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture
def dataset(tmp_path):
    assert run("gen-data", "--out", tmp_path / "data", "--count", 12, "--seed", 4, "--size", 48) == 0
    return tmp_path / "data"


def save_pipeline(path, raw=None, variant=None):
    cfg = PipelineConfig.from_dict(raw or {})
    if variant:
        cfg = parse_variant(variant, cfg)
    Pipeline.build(cfg).save(path)
    return path


class TestGenData:
    def test_empty(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--count", 0) == 0
        assert read_json(tmp_path / "labels.json") == {"grid": 6, "scenes": []}
        man = read_json(tmp_path / "manifest.json")
        assert man["command"] == "gen-data" and man["artifacts"] == ["labels.json"]

    def test_same_seed_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--out", tmp_path / name, "--count", 5, "--seed", 9) == 0
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_counts_and_size(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--count", 7, "--size", 96) == 0
        files = sorted(tmp_path.glob("*.ppm"))
        assert len(files) == 7
        assert all(read_ppm(f).shape == (96, 96, 3) for f in files)

    def test_bad_geometry(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--count", 1, "--size", 50) == 2

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("x")
        assert run("gen-data", "--out", tmp_path / "file" / "sub", "--count", 1) == 3


class TestTrain:
    def test_tvs_with_scaler(self, tmp_path, dataset, capsys):
        write_json(tmp_path / "c.json", {"pipeline": {"tvs": {"mode": "enable"}, "scaler": {"kind": "bilinear"}}})
        assert run("train", "--config", tmp_path / "c.json", "--data", dataset, "--out", tmp_path / "w") == 2
        assert "/pipeline/scaler" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, dataset, capsys):
        write_json(tmp_path / "c.json", {"train": {"epoch": 3}})
        assert run("train", "--config", tmp_path / "c.json", "--data", dataset, "--out", tmp_path / "w") == 2
        assert "/train/epoch" in capsys.readouterr().err

    def test_missing_config(self, tmp_path, dataset):
        assert run("train", "--config", tmp_path / "absent.json", "--data", dataset, "--out", tmp_path / "w") == 3

    def test_writes_weights_history_manifest(self, tmp_path, dataset):
        write_json(tmp_path / "c.json", {"seed": 2, "train": {"epochs": 2}})
        assert run("train", "--config", tmp_path / "c.json", "--data", dataset, "--out", tmp_path / "w") == 0
        hist = read_json(tmp_path / "w" / "history.json")
        assert hist["seed"] == 2 and len(hist["ap_history"]) == 2
        assert PipelineConfig.from_dict(hist["config"]).to_dict() == hist["config"]
        assert list((tmp_path / "w").glob("*.vten"))
        man = read_json(tmp_path / "w" / "manifest.json")
        assert man["config"] == hist["config"] and "history.json" in man["artifacts"]

    def test_five_variant_sweep(self, tmp_path, dataset):
        names = ["bypass+bypass", "tvs", "vltm+tvs", "4bit:bypass", "4bit:vltm+tvs"]
        write_json(tmp_path / "c.json", {"train": {"epochs": 1}, "sweep": names})
        assert run("train", "--config", tmp_path / "c.json", "--data", dataset, "--out", tmp_path / "w") == 0
        results = sorted((tmp_path / "w").glob("*/result.json"))
        assert len(results) == 5
        assert sorted(read_json(r)["variant"] for r in results) == sorted(names)
        assert len(list((tmp_path / "w").rglob("manifest.json"))) == 1

    def test_bad_sweep_entry(self, tmp_path, dataset, capsys):
        write_json(tmp_path / "c.json", {"sweep": ["tvs", "tvs+sharpen"]})
        assert run("train", "--config", tmp_path / "c.json", "--data", dataset, "--out", tmp_path / "w") == 2
        assert "/sweep/1" in capsys.readouterr().err


class TestTune:
    @pytest.fixture
    def net(self, tmp_path):
        return save_pipeline(tmp_path / "net", {"backbone": {"widths": [4, 4, 4]}})

    @pytest.fixture
    def pairs(self, tmp_path):
        d = tmp_path / "pairs"
        d.mkdir()
        rng = np.random.default_rng(0)
        for i in range(2):
            clean = (rng.random((24, 24, 3)) * 255).astype(np.uint8)
            noisy = np.clip(clean.astype(int) + rng.integers(-20, 21, clean.shape), 0, 255).astype(np.uint8)
            write_ppm(d / f"p{i}_clean.ppm", clean)
            write_ppm(d / f"p{i}_noisy.ppm", noisy)
        return d

    def test_budget_bound(self, tmp_path, net, pairs):
        assert run("tune", "--pairs", pairs, "--net", net, "--budget", 19, "--out", tmp_path / "r") == 2
        assert run("tune", "--pairs", pairs, "--net", net, "--budget", 20, "--out", tmp_path / "r") == 0
        rep = read_json(tmp_path / "r" / "report.json")
        assert len(rep["history"]) <= 20 and rep["best_loss"] <= rep["init_loss"]
        assert set(rep["best"]) == {"sigma_spatial", "sigma_range", "blend"}

    def test_unmatched_pairs(self, tmp_path, net, pairs, capsys):
        (pairs / "p1_clean.ppm").unlink()
        (pairs / "extra_clean.ppm").write_bytes((pairs / "p0_clean.ppm").read_bytes())
        assert run("tune", "--pairs", pairs, "--net", net, "--budget", 20, "--out", tmp_path / "r") == 3
        err = capsys.readouterr().err
        assert "p1_clean.ppm" in err and "extra_noisy.ppm" in err

    def test_injected_variance_sweep(self, tmp_path, net, pairs):
        argv = ["tune", "--pairs", pairs, "--net", net, "--budget", 20, "--out", tmp_path / "r", "--inject",
                0.06, 0.12, 0.18]
        assert run(*argv) == 0
        reports = sorted((tmp_path / "r").glob("report_var*.json"))
        assert [read_json(r)["variance"] for r in reports] == [0.06, 0.12, 0.18]


class TestProcess:
    @pytest.fixture
    def image(self, tmp_path):
        scene = gen_synthetic_scene(3, 48, 6)
        path = tmp_path / "in.ppm"
        write_ppm(path, (scene.image * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0))
        return path

    def test_identity_pipeline(self, tmp_path, image):
        w = save_pipeline(tmp_path / "w", {"pipeline": {"vltm": {"mode": "enable"}}})
        assert run("process", "--in", image, "--weights", w, "--out", tmp_path / "o.ppm") == 0
        diff = read_ppm(tmp_path / "o.ppm").astype(int) - read_ppm(image).astype(int)
        assert np.abs(diff).max() <= 1

    def test_viz_is_valid_p6(self, tmp_path, image):
        w = save_pipeline(tmp_path / "w", variant="tvs")
        assert run("process", "--in", image, "--weights", w, "--out", tmp_path / "v.ppm", "--viz") == 0
        raw = (tmp_path / "v.ppm").read_bytes()
        assert raw.startswith(b"P6\n24 24\n255\n")
        assert read_ppm(tmp_path / "v.ppm").shape == (24, 24, 3)

    def test_viz_command(self, tmp_path, image):
        w = save_pipeline(tmp_path / "w", variant="vltm+tvs")
        assert run("viz", "--in", image, "--weights", w, "--out", tmp_path / "v.ppm") == 0
        assert read_ppm(tmp_path / "v.ppm").max() <= 255

    def test_fractional_factor_geometry(self, tmp_path):
        w = save_pipeline(tmp_path / "w", {"pipeline": {"tvs": {"mode": "enable", "factor": "5/2"}}})
        img = (np.random.default_rng(0).random((100, 100, 3)) * 255).astype(np.uint8)
        write_ppm(tmp_path / "big.ppm", img)
        assert run("process", "--in", tmp_path / "big.ppm", "--weights", w, "--out", tmp_path / "o.ppm") == 0
        assert read_ppm(tmp_path / "o.ppm").shape == (40, 40, 3)

    def test_plane_export(self, tmp_path, image):
        w = save_pipeline(tmp_path / "w", {"pipeline": {"out_bits": 2, "vltm": {"mode": "enable"}}})
        argv = ["process", "--in", image, "--weights", w, "--out", tmp_path / "o.ppm", "--plane", tmp_path / "p.pgm"]
        assert run(*argv) == 0
        plane, bits = read_pgm(tmp_path / "p.pgm")
        assert bits == 2 and plane.shape == (48, 48) and plane.max() <= 3

    def test_plane_needs_reduction(self, tmp_path, image):
        w = save_pipeline(tmp_path / "w")
        argv = ["process", "--in", image, "--weights", w, "--out", tmp_path / "o.ppm", "--plane", tmp_path / "p.pgm"]
        assert run(*argv) == 2

    def test_weight_mismatch(self, tmp_path, image):
        w = save_pipeline(tmp_path / "w", variant="tvs")
        cfg = read_json(w / "config.json")
        cfg["pipeline"]["tvs"]["n"] = 12
        write_json(w / "config.json", cfg)
        assert run("process", "--in", image, "--weights", w, "--out", tmp_path / "o.ppm") == 2

    def test_not_a_weights_dir(self, tmp_path, image):
        assert run("process", "--in", image, "--weights", tmp_path, "--out", tmp_path / "o.ppm") == 3


class TestEval:
    def test_empty_data(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "e", "--count", 0) == 0
        w = save_pipeline(tmp_path / "w")
        assert run("eval", "--weights", w, "--data", tmp_path / "e") == 3
        assert run("eval", "--weights", w, "--data", tmp_path / "absent") == 3

    def test_grid_mismatch(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "d", "--count", 2, "--size", 48, "--grid", 4) == 0
        assert run("eval", "--weights", save_pipeline(tmp_path / "w"), "--data", tmp_path / "d") == 2

    def test_deterministic_json(self, tmp_path, dataset, capsys):
        w = save_pipeline(tmp_path / "w")
        assert run("eval", "--weights", w, "--data", dataset, "--out", tmp_path / "a.json") == 0
        assert run("eval", "--weights", w, "--data", dataset, "--out", tmp_path / "b.json") == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert 0.0 <= read_json(tmp_path / "a.json")["ap"] <= 1.0


class TestRerun:
    def test_train_rerun_byte_identical(self, tmp_path, dataset):
        write_json(tmp_path / "c.json", {"seed": 5, "train": {"epochs": 1}, "sweep": ["bypass", "2bit:vltm"]})
        assert run("train", "--config", tmp_path / "c.json", "--data", dataset, "--out", tmp_path / "a") == 0
        (tmp_path / "c.json").unlink()
        assert run("rerun", "--manifest", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b") == 0
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_gen_data_rerun(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "a", "--count", 3, "--seed", 7) == 0
        assert run("rerun", "--manifest", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b") == 0
        assert tree(tmp_path / "a") == tree(tmp_path / "b")


@pytest.mark.skipif(not (GOLDEN / "golden.json").exists(), reason="golden files not generated")
class TestGolden:
    def test_baseline_in_range(self):
        g = read_json(GOLDEN / "golden.json")
        assert g["ap"] >= 0.85
        assert g["range"][0] <= g["ap"] <= g["range"][1]
        assert g["ap_history"][-1] == g["ap"]

    def test_eval_reproduces_golden_ap(self, tmp_path, capsys):
        g = read_json(GOLDEN / "golden.json")
        val = tmp_path / "val"
        assert run("gen-data", "--out", val, "--count", g["val"]["count"], "--seed", g["val"]["seed"]) == 0
        assert run("eval", "--weights", GOLDEN / "baseline", "--data", val, "--out", tmp_path / "e.json") == 0
        assert read_json(tmp_path / "e.json")["ap"] == g["ap"]
