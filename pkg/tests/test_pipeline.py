import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visionisp.detector import detection_loss_logits
from visionisp.errors import ConfigError
from visionisp.pipeline import DEFAULT_CONFIG, Pipeline, PipelineConfig, bilinear_resize, parse_variant
from visionisp.scenes import make_scene_set
from visionisp.tensor import Tensor, bilinear_matrix, grad_check
from visionisp.train import evaluate, train_end_to_end
from visionisp.tvs import build_stride_plan


def pointer_of(d):
    with pytest.raises(ConfigError) as info:
        PipelineConfig.from_dict(d)
    return info.value.pointer


class TestConfig:
    def test_defaults(self):
        assert PipelineConfig.from_dict({}).to_dict() == DEFAULT_CONFIG

    def test_tvs_and_scaler(self):
        d = {"pipeline": {"tvs": {"mode": "enable"}, "scaler": {"kind": "bilinear"}}}
        assert pointer_of(d) == "/pipeline/scaler"

    def test_unknown_key(self):
        assert pointer_of({"pipeline": {"vltm": {"gama": 1.0}}}) == "/pipeline/vltm/gama"
        assert pointer_of({"trian": {}}) == "/trian"

    def test_type_errors(self):
        assert pointer_of({"train": {"lr": "fast"}}) == "/train/lr"
        assert pointer_of({"pipeline": {"out_bits": 2.5}}) == "/pipeline/out_bits"
        assert pointer_of({"pipeline": {"vltm": {"frozen": 1}}}) == "/pipeline/vltm/frozen"

    def test_invariants(self):
        assert pointer_of({"pipeline": {"bit_policy": "tvs_output_site"}}) == "/pipeline/bit_policy"
        assert pointer_of({"pipeline": {"out_bits": 9}}) == "/pipeline/out_bits"
        assert pointer_of({"pipeline": {"vltm": {"mode": "on"}}}) == "/pipeline/vltm/mode"
        assert pointer_of({"pipeline": {"tvs": {"mode": "enable", "k": 3, "factor": "5/2"}}}) == "/pipeline/tvs/factor"
        assert pointer_of({"pipeline": {"scaler": {"factor": "1/2"}}}) == "/pipeline/scaler/factor"
        assert pointer_of({"init": {"load": ["tvs"]}}) == "/init/weights"

    def test_message_carries_pointer(self):
        with pytest.raises(ConfigError, match="/pipeline/scaler"):
            PipelineConfig.from_dict({"pipeline": {"tvs": {"mode": "enable"}, "scaler": {"kind": "bilinear"}}})

    @settings(max_examples=80, deadline=None)
    @given(st.dictionaries(st.text(min_size=1, max_size=8), st.integers() | st.text(max_size=4), min_size=1,
                           max_size=3))
    def test_fuzzed_unknown_keys_rejected(self, junk):
        junk = {k: v for k, v in junk.items() if k not in DEFAULT_CONFIG}
        if not junk:
            return
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict(junk)
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"pipeline": {**junk}} if not set(junk) & set(DEFAULT_CONFIG["pipeline"])
                                     else {"backbone": junk})

    def test_replace(self):
        cfg = PipelineConfig.from_dict({}).replace(**{"pipeline.out_bits": 4})
        assert cfg.p["out_bits"] == 4

    def test_json_round_trip(self):
        cfg = parse_variant("4bit:vltm+tvs", PipelineConfig.from_dict({}))
        assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()


class TestVariants:
    def test_sweep_names(self):
        base = PipelineConfig.from_dict({})
        a = parse_variant("bypass+bypass", base)
        assert not a.vltm_on and not a.tvs_on and a.scaler_on and a.p["out_bits"] == 8
        b = parse_variant("4bit:vltm+tvs", base)
        assert b.vltm_on and b.tvs_on and b.p["bit_policy"] == "tvs_output_site" and b.p["out_bits"] == 4
        c = parse_variant("4bit:bypass", base)
        assert c.p["out_bits"] == 4 and c.scaler_on

    def test_bad_names(self):
        with pytest.raises(ConfigError):
            parse_variant("tvs+sharpen", PipelineConfig.from_dict({}))
        with pytest.raises(ConfigError):
            parse_variant("four:tvs", PipelineConfig.from_dict({}))


class TestPipeline:
    def test_identity_8bit(self):
        cfg = PipelineConfig.from_dict({"pipeline": {"vltm": {"mode": "enable"}}})
        pipe = Pipeline.build(cfg)
        x = make_scene_set(0, 2).images
        out = pipe.preprocess(Tensor(x)).data
        assert np.abs(out - x).max() <= 1 / 255 + 1e-5

    def test_bilinear_geometry(self):
        x = Tensor(np.random.default_rng(0).random((1, 3, 100, 100)))
        assert bilinear_resize(x, build_stride_plan(5, 2)).shape == (1, 3, 40, 40)
        assert bilinear_resize(x, build_stride_plan(2)).shape == (1, 3, 50, 50)

    def test_bilinear_factor_two_is_pair_average(self):
        m = bilinear_matrix(8, 4, 2.0)
        expected = np.zeros((4, 8))
        for i in range(4):
            expected[i, 2 * i:2 * i + 2] = 0.5
        np.testing.assert_allclose(m, expected)

    def test_downscaling_keeps_head_geometry(self):
        for name in ("tvs", "bypass", "4bit:vltm+tvs"):
            pipe = Pipeline.build(parse_variant(name, PipelineConfig.from_dict({})))
            assert pipe.logits(Tensor(make_scene_set(0, 1).images)).shape == (1, 1, 6, 6)

    def test_uniform_site_quantizes(self):
        pipe = Pipeline.build(PipelineConfig.from_dict({"pipeline": {"out_bits": 2}}))
        taps = {}
        pipe.preprocess(Tensor(make_scene_set(0, 1).images), taps=taps)
        assert taps["plane"].bits == 2 and len(np.unique(taps["plane"].values)) <= 4

    def test_joint_site_quantizes_tvs_output(self):
        pipe = Pipeline.build(parse_variant("2bit:vltm+tvs", PipelineConfig.from_dict({})))
        taps = {}
        pipe.preprocess(Tensor(make_scene_set(0, 1).images), taps=taps)
        assert taps["plane"].values.shape == (1, 3, 48, 48)
        assert len(np.unique(taps["plane"].values)) <= 4

    def test_full_stack_gradient(self):
        cfg = parse_variant("4bit:vltm+tvs", PipelineConfig.from_dict(
            {"pipeline": {"tvs": {"n": 6, "k": 3}}, "backbone": {"widths": [4, 4, 4], "grid": 2}}))
        pipe = Pipeline.build(cfg, dtype=np.float64)
        # move pre-activations off the ReLU and clamp kinks
        pipe.tvs.extract.bias.data[:] = 0.05
        pipe.tvs.fuse.bias.data[:] = 0.05
        x = Tensor(make_scene_set(0, 1, size=16, grid=2).images.astype(np.float64))
        labels = np.array([[[1, 0], [0, 0]]])

        params = [t for t, _ in pipe.trainable()]
        err = grad_check(lambda ps: detection_loss_logits(pipe.logits(x, surrogate=True), labels), params,
                         step=1e-6, samples=4, rng=np.random.default_rng(1))
        assert err < 1e-3

    def test_save_load(self, tmp_path):
        cfg = parse_variant("4bit:vltm+tvs", PipelineConfig.from_dict({}))
        pipe = Pipeline.build(cfg)
        pipe.vltm.gamma.data[...] = 0.8
        pipe.save(tmp_path)
        back = Pipeline.load(tmp_path)
        x = Tensor(make_scene_set(0, 2).images)
        np.testing.assert_array_equal(pipe.logits(x).data, back.logits(x).data)

    def test_load_into_bypassed_block(self, tmp_path):
        Pipeline.build(parse_variant("tvs", PipelineConfig.from_dict({}))).save(tmp_path)
        with pytest.raises(ConfigError):
            Pipeline.build(PipelineConfig.from_dict({"init": {"weights": str(tmp_path), "load": ["tvs"]}}))


class TestTraining:
    @pytest.fixture(scope="class")
    @classmethod
    def data(cls):
        return make_scene_set(0, 64), make_scene_set(500, 32)

    def test_zero_lr(self, data):
        cfg = PipelineConfig.from_dict({"train": {"lr": 0.0, "epochs": 2}})
        before = [t.data.copy() for t in Pipeline.build(cfg).backbone.params]
        res = train_end_to_end(cfg, *data)
        for a, b in zip(before, res.pipeline.backbone.params):
            np.testing.assert_array_equal(a, b.data)
        assert res.ap_history[0] == res.ap_history[1]

    def test_deterministic(self, data):
        cfg = PipelineConfig.from_dict({"seed": 3, "train": {"epochs": 2},
                                        "pipeline": {"out_bits": 2, "vltm": {"mode": "enable"}}})
        a, b = train_end_to_end(cfg, *data), train_end_to_end(cfg, *data)
        assert a.ap_history == b.ap_history and a.loss_history == b.loss_history

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_decreases(self, seed):
        train, val = make_scene_set(seed, 96), make_scene_set(seed + 500, 16)
        res = train_end_to_end(PipelineConfig.from_dict({"seed": seed, "train": {"epochs": 5}}), train, val)
        assert res.loss_history[-1] < res.loss_history[0]

    def test_frozen_block(self, data):
        cfg = parse_variant("tvs", PipelineConfig.from_dict({"pipeline": {"tvs": {"frozen": True}},
                                                             "train": {"epochs": 1}}))
        pipe = Pipeline.build(cfg)
        before = [t.data.copy() for t in pipe.tvs.params]
        res = train_end_to_end(cfg, *data, pipeline=pipe)
        for a, b in zip(before, res.pipeline.tvs.params):
            np.testing.assert_array_equal(a, b.data)
        assert 0.0 <= evaluate(res.pipeline, data[1]) <= 1.0
