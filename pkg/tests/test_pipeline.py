"""Toy model, two-stage driver, checkpoint persistence, and forward paths."""

import numpy as np
import pytest

from qqq.checkpoint import read_checkpoint, write_checkpoint
from qqq.errors import CalibrationError, CheckpointFormatError, ConfigError
from qqq.gptq import build_hessian, rtn_quantize
from qqq.pipeline import (
    QuantizeOptions,
    dequantized_forward,
    eval_report,
    forward_fp,
    forward_quant,
    quantize_layer,
    quantize_model,
    synthetic_tokens,
)
from qqq.quantize import QuantSpec
from qqq.toy_model import ToyModel, gelu, layer_norm

PC = QuantSpec("per-channel")
PG32 = QuantSpec("per-group", 32)


def outlier_calibration(rng, tokens, k):
    x = rng.standard_normal((tokens, k))
    x[:, : max(1, k // 16)] *= 60.0  # a few dominant channels
    return x


class TestToyModel:
    def test_forward_shapes(self):
        m = ToyModel.random(dim=16, n_blocks=2, seed=0)
        y = m.forward(np.zeros((5, 16)))
        assert y.shape == (5, 16)

    def test_deterministic_by_seed(self):
        a = ToyModel.random(dim=16, seed=3)
        b = ToyModel.random(dim=16, seed=3)
        x = synthetic_tokens(0, 4, 16)
        assert np.array_equal(a.forward(x), b.forward(x))

    def test_checkpoint_round_trip(self, tmp_path):
        m = ToyModel.random(dim=16, n_blocks=2, seed=1)
        p = str(tmp_path / "fp.qqq")
        write_checkpoint(m.to_checkpoint(), p)
        back = ToyModel.from_checkpoint(read_checkpoint(p))
        x = synthetic_tokens(1, 6, 16)
        assert np.array_equal(m.forward(x), back.forward(x))

    def test_layer_norm_normalizes(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((8, 32)) * 5 + 3
        h = layer_norm(x, np.ones(32))
        np.testing.assert_allclose(h.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(h.var(axis=1), 1.0, atol=1e-4)

    def test_gelu_known_values(self):
        assert gelu(np.array([0.0]))[0] == 0.0
        assert gelu(np.array([10.0]))[0] == pytest.approx(10.0, rel=1e-12)
        assert gelu(np.array([1.0]))[0] == pytest.approx(0.841344746, rel=1e-8)

    def test_wrong_kind_rejected(self):
        m = ToyModel.random(dim=16)
        ckpt = m.to_checkpoint()
        ckpt.metadata["kind"] = "other"
        with pytest.raises(CheckpointFormatError):
            ToyModel.from_checkpoint(ckpt)


class TestQuantizeLayer:
    def test_metrics_ordering_on_outlier_layer(self):
        rng = np.random.default_rng(0)
        x = outlier_calibration(rng, 64, 32)
        w = rng.standard_normal((32, 16)) / np.sqrt(32)
        _, met = quantize_layer(w, x, PC)
        assert met["err_AS"] <= met["err_B"]
        assert met["err_AS_GPTQ"] <= met["err_AS"]
        assert met["n_smoothed"] >= 1

    def test_stage_bypass_equals_plain_rtn(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((32, 16))
        w = rng.standard_normal((16, 8))
        layer, met = quantize_layer(
            w, x, PC, QuantizeOptions(smooth=False, gptq=False)
        )
        rtn = rtn_quantize(w, PC)
        assert np.array_equal(layer.qweights.packed, rtn.qweights.packed)
        assert np.array_equal(layer.qweights.s_w, rtn.qweights.s_w)
        assert np.all(layer.plan.s == 1.0)
        assert met["err_B"] == met["err_AS"]

    def test_gptq_stage_sees_smoothed_hessian(self):
        # with smoothing on, the sweep runs on X/s and W*s; compensation error
        # must match an independent sweep on those operands
        from qqq.gptq import gptq_sweep

        rng = np.random.default_rng(2)
        x = outlier_calibration(rng, 48, 16)
        w = rng.standard_normal((16, 8))
        layer, met = quantize_layer(w, x, PC)
        s = layer.plan.s
        ref = gptq_sweep(w * s[:, None], build_hessian(x / s[None, :]), PC)
        assert np.array_equal(layer.qweights.packed, ref.qweights.packed)

    def test_rejects_bad_calibration(self):
        w = np.ones((4, 2))
        with pytest.raises(CalibrationError):
            quantize_layer(w, np.zeros((8, 4)), PC)
        with pytest.raises(CalibrationError):
            quantize_layer(w, np.full((8, 4), np.nan), PC)

    def test_lossless_layer_all_metrics_zero(self):
        # activations on the int8 grid, weights on the int4 grid with
        # power-of-two scales: every stage is exact
        x = np.array([[127.0, -64.0], [32.0, 127.0], [127.0, -2.0]] * 6)
        w = np.diag([0.875, -0.5])
        _, met = quantize_layer(w, x, PC)
        assert met["err_B"] == 0.0
        assert met["err_AS"] == 0.0
        assert met["err_AS_GPTQ"] == 0.0


class TestQuantizeModel:
    def test_covers_every_linear_once(self):
        m = ToyModel.random(dim=16, n_blocks=2, seed=0)
        x = synthetic_tokens(0, 32, 16)
        ckpt, report, calib = quantize_model(m, x, PC)
        assert sorted(report["layers"]) == sorted(m.linear_names())
        assert sorted(calib.layers) == sorted(m.linear_names())
        for name in m.linear_names():
            assert f"{name}.q4" in ckpt.tensors
            assert f"{name}.s_w" in ckpt.tensors

    def test_mean_metrics_are_layer_means(self):
        m = ToyModel.random(dim=16, seed=1)
        _, report, _ = quantize_model(m, synthetic_tokens(1, 32, 16), PC)
        for key in ("err_B", "err_AS", "err_AS_GPTQ"):
            want = np.mean([v[key] for v in report["layers"].values()])
            assert report[f"mean_{key}"] == pytest.approx(want, rel=1e-12)

    def test_deterministic_bytes(self, tmp_path):
        m = ToyModel.random(dim=32, seed=2)
        x = synthetic_tokens(2, 32, 32)
        p1, p2 = str(tmp_path / "1.qqq"), str(tmp_path / "2.qqq")
        write_checkpoint(quantize_model(m, x, PG32)[0], p1)
        write_checkpoint(quantize_model(m, x, PG32)[0], p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_quantized_checkpoint_round_trip(self, tmp_path):
        m = ToyModel.random(dim=16, seed=3)
        x = synthetic_tokens(3, 32, 16)
        ckpt, _, _ = quantize_model(m, x, PC)
        p = str(tmp_path / "q.qqq")
        write_checkpoint(ckpt, p)
        back = read_checkpoint(p)
        probe = synthetic_tokens(4, 8, 16)
        got = forward_quant(back, probe, "per-channel")
        want = forward_quant(ckpt, probe, "per-channel")
        assert np.array_equal(got, want)

    def test_rejects_too_few_tokens(self):
        m = ToyModel.random(dim=16)
        with pytest.raises(CalibrationError):
            quantize_model(m, synthetic_tokens(0, 4, 16), PC)

    def test_fp_calibration_flag_changes_late_layers(self):
        m = ToyModel.random(dim=16, seed=4)
        x = synthetic_tokens(4, 48, 16)
        _, seq, calib_seq = quantize_model(m, x, PC)
        _, fp, calib_fp = quantize_model(
            m, x, PC, QuantizeOptions(fp_calibration=True)
        )
        # first linear sees identical inputs either way
        assert np.array_equal(calib_seq.layers["block0.fc1"], calib_fp.layers["block0.fc1"])
        assert not np.array_equal(
            calib_seq.layers["block1.fc1"], calib_fp.layers["block1.fc1"]
        )


class TestForwardPaths:
    @pytest.mark.parametrize("spec,engine", [(PC, "per-channel"), (PG32, "per-group")])
    def test_quant_forward_tracks_fp(self, spec, engine):
        m = ToyModel.random(dim=32, seed=5)
        x = synthetic_tokens(5, 64, 32)
        ckpt, _, _ = quantize_model(m, x, spec)
        probe = synthetic_tokens(6, 16, 32)
        y_q = forward_quant(ckpt, probe, engine)
        y_fp = forward_fp(m, probe)
        rel = np.linalg.norm(y_q - y_fp) / np.linalg.norm(y_fp)
        assert rel < 0.5

    @pytest.mark.parametrize("spec,engine", [(PC, "per-channel"), (PG32, "per-group")])
    def test_integer_path_matches_dequantized_oracle(self, spec, engine):
        m = ToyModel.random(dim=32, seed=6)
        x = synthetic_tokens(6, 64, 32)
        ckpt, _, _ = quantize_model(m, x, spec)
        probe = synthetic_tokens(7, 16, 32)
        y_q = forward_quant(ckpt, probe, engine)
        y_o = dequantized_forward(ckpt, probe)
        denom = np.linalg.norm(y_o) or 1.0
        assert np.linalg.norm(y_q - y_o) / denom < 1e-2

    def test_engine_mismatch_raises(self):
        m = ToyModel.random(dim=16, seed=7)
        ckpt, _, _ = quantize_model(m, synthetic_tokens(7, 32, 16), PC)
        with pytest.raises(ConfigError):
            forward_quant(ckpt, synthetic_tokens(8, 4, 16), "per-group")

    def test_wrong_kind_rejected(self):
        m = ToyModel.random(dim=16, seed=8)
        with pytest.raises(ConfigError):
            forward_quant(m.to_checkpoint(), synthetic_tokens(8, 4, 16), "per-channel")

    def test_eval_report_fields(self, tmp_path):
        m = ToyModel.random(dim=16, seed=9)
        ckpt, _, _ = quantize_model(m, synthetic_tokens(9, 32, 16), PC)
        rep = eval_report(m.to_checkpoint(), ckpt, synthetic_tokens(10, 8, 16))
        assert rep["engine"] == "per-channel"
        assert rep["tokens"] == 8
        assert 0.0 <= rep["rel_frobenius_error"] < 0.5
