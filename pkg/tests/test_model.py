"""Network assembly: crops, shape audit, forward/backward mechanics."""

import numpy as np
import pytest

from gaitage import losses
from gaitage.errors import ConfigError
from gaitage.gradcheck import check_model
from gaitage.model import (ModelConfig, audit_shapes, backward, build,
                           crop_parts, forward, param_count)
from gaitage.tensor import default_dtype

SCALED = ModelConfig(input_h=32, input_w=22, crop_rows=(6, 12, 14),
                     conv_channels=(4, 8, 8), conv_kernels=(7, 5, 3),
                     fc_width=32, k_minus_1=8, dropout_rate=0.0)


class TestCropParts:
    def test_default_box_heights(self):
        cfg = ModelConfig()
        batch = np.zeros((2, 1, 128, 88))
        head, body, feet = crop_parts(batch, cfg)
        assert head.shape == (2, 1, 22, 88)
        assert body.shape == (2, 1, 48, 88)
        assert feet.shape == (2, 1, 58, 88)

    def test_rows_partitioned_in_order(self):
        cfg = ModelConfig(input_h=6, input_w=4, crop_rows=(2, 2, 2),
                          conv_channels=(1, 1, 1), conv_kernels=(1, 1, 1),
                          fc_width=2, k_minus_1=2)
        batch = np.arange(6.0).reshape(1, 1, 6, 1) * np.ones((1, 1, 6, 4))
        head, body, feet = crop_parts(batch, cfg)
        assert set(np.unique(head)) == {0.0, 1.0}
        assert set(np.unique(body)) == {2.0, 3.0}
        assert set(np.unique(feet)) == {4.0, 5.0}

    def test_reconcatenation_restores_input(self):
        rng = np.random.default_rng(0)
        batch = rng.random((3, 1, 32, 22))
        parts = crop_parts(batch, SCALED)
        np.testing.assert_array_equal(np.concatenate(parts, axis=2), batch)

    def test_row_sum_mismatch(self):
        with pytest.raises(ConfigError, match="crop_rows"):
            crop_parts(np.zeros((1, 1, 30, 22)), SCALED)


class TestShapeAudit:
    def test_default_config_passes_with_88_outputs(self):
        cfg = ModelConfig()
        plan = audit_shapes(cfg)
        assert plan.out_dim == 88
        assert plan.final_hw == (16, 11)
        assert plan.feature_dim == 2 * 128 * 16 * 11

    def test_scaled_config(self):
        plan = audit_shapes(SCALED)
        assert plan.final_hw == (16, 11)
        assert plan.local3_stride == 1
        assert plan.feature_dim == 2 * 8 * 16 * 11

    def test_default_pools_three_times_globally(self):
        plan = audit_shapes(ModelConfig())
        assert plan.global_pool == (True, True, True)

    def test_default_config_builds_and_runs(self):
        model = build(ModelConfig(), seed=0)
        x = np.random.default_rng(0).random((2, 1, 128, 88)).astype(np.float32)
        out = forward(model, x).outputs
        assert out.shape == (2, 88)
        assert (out > 0).all() and (out < 1).all()

    def test_crop_sum_violation_rejected(self):
        with pytest.raises(ConfigError, match="crop_rows"):
            audit_shapes(ModelConfig(crop_rows=(22, 48, 57)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError, match="odd"):
            audit_shapes(ModelConfig(conv_kernels=(7, 4, 3)))

    def test_kernel_exceeding_unpadded_input_named(self):
        cfg = ModelConfig(input_h=8, input_w=8, crop_rows=(2, 2, 4),
                          conv_channels=(2, 2, 2), conv_kernels=(7, 5, 3),
                          fc_width=4, k_minus_1=3, padding="valid")
        with pytest.raises(ConfigError, match="global conv2"):
            audit_shapes(cfg)
        # with the global path intact the failing local crop is named instead
        cfg2 = ModelConfig(input_h=12, input_w=32, crop_rows=(2, 4, 6),
                           conv_channels=(2, 2, 2), conv_kernels=(3, 3, 3),
                           fc_width=4, k_minus_1=3, padding="valid")
        with pytest.raises(ConfigError, match="local head conv1"):
            audit_shapes(cfg2)


class TestBuild:
    def test_same_seed_same_parameters(self):
        a = build(SCALED, seed=5)
        b = build(SCALED, seed=5)
        assert a.params.keys() == b.params.keys()
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_different_seed_differs(self):
        a = build(SCALED, seed=5)
        b = build(SCALED, seed=6)
        assert any((a.params[n] != b.params[n]).any()
                   for n in a.params if n.endswith("weight"))

    def test_param_count_is_config_function(self):
        count = param_count(SCALED)
        model = build(SCALED, seed=0)
        assert count == sum(p.size for p in model.params.values())
        assert count == param_count(SCALED)

    def test_degenerate_single_classifier(self):
        cfg = ModelConfig(input_h=32, input_w=22, crop_rows=(6, 12, 14),
                          conv_channels=(4, 8, 8), conv_kernels=(7, 5, 3),
                          fc_width=32, k_minus_1=1, dropout_rate=0.0)
        model = build(cfg, 0)
        out = forward(model, np.zeros((3, 1, 32, 22))).outputs
        assert out.shape == (3, 1)

    def test_weights_bounded_by_fan_in(self):
        model = build(SCALED, seed=1)
        w = model.params["global.conv1.weight"]
        lim = np.sqrt(6.0 / (1 * 7 * 7))
        assert (np.abs(w) <= lim).all()
        assert (model.params["fc4.bias"] == 0).all()


class TestForward:
    def test_eval_deterministic(self):
        model = build(SCALED, 1)
        rng = np.random.default_rng(2)
        x = rng.random((4, 1, 32, 22)).astype(np.float32)
        a = forward(model, x, mode="eval").outputs
        b = forward(model, x, mode="eval").outputs
        np.testing.assert_array_equal(a, b)

    def test_outputs_in_unit_interval(self):
        model = build(SCALED, 1)
        rng = np.random.default_rng(3)
        out = forward(model, rng.random((8, 1, 32, 22)).astype(np.float32)).outputs
        assert (out > 0).all() and (out < 1).all()

    def test_train_mode_deterministic_given_rng(self):
        cfg = ModelConfig(input_h=32, input_w=22, crop_rows=(6, 12, 14),
                          conv_channels=(4, 8, 8), conv_kernels=(7, 5, 3),
                          fc_width=32, k_minus_1=8, dropout_rate=0.5)
        model = build(cfg, 1)
        x = np.random.default_rng(4).random((4, 1, 32, 22)).astype(np.float32)
        a = forward(model, x, "train", np.random.default_rng(9)).outputs
        b = forward(model, x, "train", np.random.default_rng(9)).outputs
        np.testing.assert_array_equal(a, b)
        c = forward(model, x, "train", np.random.default_rng(10)).outputs
        assert (a != c).any()

    def test_train_mode_without_rng_rejected(self):
        cfg = ModelConfig(input_h=32, input_w=22, crop_rows=(6, 12, 14),
                          conv_channels=(4, 8, 8), conv_kernels=(7, 5, 3),
                          fc_width=32, k_minus_1=8, dropout_rate=0.5)
        model = build(cfg, 1)
        with pytest.raises(ConfigError, match="generator"):
            forward(model, np.zeros((1, 1, 32, 22)), mode="train")

    def test_wrong_spatial_size_rejected(self):
        model = build(SCALED, 1)
        with pytest.raises(ConfigError, match="does not match"):
            forward(model, np.zeros((1, 1, 30, 22)))

    def test_both_information_routes_are_live(self):
        """Zeroing either path's third conv changes the predictions."""
        model = build(SCALED, 1)
        x = np.random.default_rng(5).random((6, 1, 32, 22)).astype(np.float32)
        base = forward(model, x).outputs

        no_global = model.clone()
        no_global.params["global.conv3.weight"][:] = 0
        no_global.params["global.conv3.bias"][:] = 0
        out_g = forward(no_global, x).outputs
        assert np.abs(out_g - base).max() > 0

        no_local = model.clone()
        no_local.params["local.shared.conv3.weight"][:] = 0
        no_local.params["local.shared.conv3.bias"][:] = 0
        out_l = forward(no_local, x).outputs
        assert np.abs(out_l - base).max() > 0
        assert np.abs(out_g - out_l).max() > 0

    def test_scalar_head_shape(self):
        cfg = ModelConfig(input_h=32, input_w=22, crop_rows=(6, 12, 14),
                          conv_channels=(4, 8, 8), conv_kernels=(7, 5, 3),
                          fc_width=32, k_minus_1=8, dropout_rate=0.0,
                          head_mode="scalar_regression")
        model = build(cfg, 0)
        out = forward(model, np.zeros((5, 1, 32, 22))).outputs
        assert out.shape == (5, 1)

    def test_gender_head_output(self):
        cfg = ModelConfig(input_h=32, input_w=22, crop_rows=(6, 12, 14),
                          conv_channels=(4, 8, 8), conv_kernels=(7, 5, 3),
                          fc_width=32, k_minus_1=8, dropout_rate=0.0,
                          gender_head=True)
        model = build(cfg, 0)
        fwd = forward(model, np.random.default_rng(6).random((3, 1, 32, 22)))
        assert fwd.gender.shape == (3, 1)
        assert (fwd.gender > 0).all() and (fwd.gender < 1).all()


class TestBackward:
    def _setup(self, gender=False):
        with default_dtype(np.float64):
            cfg = SCALED if not gender else ModelConfig(
                input_h=32, input_w=22, crop_rows=(6, 12, 14),
                conv_channels=(4, 8, 8), conv_kernels=(7, 5, 3),
                fc_width=32, k_minus_1=8, dropout_rate=0.0, gender_head=True)
            model = build(cfg, 2)
            x = np.random.default_rng(7).random((3, 1, 32, 22))
            fwd = forward(model, x)
        return model, fwd

    def test_zero_output_grad_gives_zero_param_grads(self):
        model, fwd = self._setup()
        grads = backward(model, fwd.record, np.zeros_like(fwd.outputs))
        assert grads.keys() == model.params.keys()
        for name, g in grads.items():
            assert g.shape == model.params[name].shape
            assert (g == 0).all(), name

    def test_linearity_in_upstream_gradient(self):
        model, fwd = self._setup()
        rng = np.random.default_rng(8)
        g1 = rng.standard_normal(fwd.outputs.shape)
        g2 = rng.standard_normal(fwd.outputs.shape)
        a = backward(model, fwd.record, g1)
        b = backward(model, fwd.record, g2)
        combined = backward(model, fwd.record, g1 + g2)
        for name in a:
            np.testing.assert_allclose(combined[name], a[name] + b[name],
                                       rtol=1e-10, atol=1e-12)

    def test_gender_grads_zero_without_gender_grad(self):
        model, fwd = self._setup(gender=True)
        grads = backward(model, fwd.record, np.ones_like(fwd.outputs))
        assert (grads["gender.weight"] == 0).all()
        assert (grads["gender.bias"] == 0).all()

    def test_gender_grad_reaches_trunk(self):
        model, fwd = self._setup(gender=True)
        only_age = backward(model, fwd.record, np.ones_like(fwd.outputs))
        with_gender = backward(model, fwd.record, np.ones_like(fwd.outputs),
                               gender_grad=np.ones_like(fwd.gender))
        assert (with_gender["gender.weight"] != 0).any()
        assert (with_gender["fc5.weight"] != only_age["fc5.weight"]).any()

    def test_gender_logit_grad_equals_prob_grad_route(self):
        """(sigma - t) injected at the logit equals the BCE-grad route
        through the sigmoid whenever the head is unsaturated."""
        from gaitage.losses import gender_bce

        model, fwd = self._setup(gender=True)
        truth = np.array([1.0, 0.0, 1.0])
        probs = fwd.gender[:, 0]
        assert (probs > 1e-6).all() and (probs < 1 - 1e-6).all()
        _, bce_grad = gender_bce(probs, truth)
        via_prob = backward(model, fwd.record, np.zeros_like(fwd.outputs),
                            gender_grad=bce_grad[:, None])
        via_logit = backward(model, fwd.record, np.zeros_like(fwd.outputs),
                             gender_logit_grad=(fwd.gender - truth[:, None]) / 3)
        for name in via_prob:
            np.testing.assert_allclose(via_logit[name], via_prob[name],
                                       rtol=1e-9, atol=1e-12)

    def test_stale_record_rejected(self):
        model, fwd = self._setup()
        with pytest.raises(ConfigError, match="does not match"):
            backward(model, fwd.record, np.zeros((5, 8)))

    def test_full_model_finite_difference_smoke(self):
        """Light version of the acceptance check: a few probes per tensor."""
        errors = check_model(samples=4, seed=3)
        assert errors.keys() == build(
            ModelConfig(input_h=32, input_w=22, crop_rows=(6, 12, 14),
                        conv_channels=(4, 8, 8), conv_kernels=(7, 5, 3),
                        fc_width=32, k_minus_1=8, dropout_rate=0.0),
            3).params.keys()
        worst = max(errors.values())
        assert worst < 1e-4, errors
