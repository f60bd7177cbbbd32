import numpy as np
import pytest

from styledg.tensor import Tensor
from styledg import tensor as T
from styledg.stylenets import SrmFlConfig, style_nets_init
from styledg.backbone import (
    BackboneConfig, classify, ema_parameters, ema_update, forward_dual,
    forward_stages, load_checkpoint, model_init, save_checkpoint,
)

DESK = BackboneConfig()


def param_count_oracle(cfg: BackboneConfig) -> int:
    # independent closed-form count: convs + norm affines + classifier
    total, cin = 0, 1
    for cout in cfg.stage_channels:
        for _ in range(cfg.blocks_per_stage):
            total += cout * cin * 9 + cout  # conv w+b
            total += 2 * cout  # norm gamma/beta
            cin = cout
    total += cfg.num_classes * cfg.stage_channels[-1] + cfg.num_classes
    return total


class TestInit:
    def test_parameter_count(self):
        state = model_init(DESK, np.random.default_rng(0))
        assert state.num_parameters() == param_count_oracle(DESK)

    def test_ema_equals_live_at_step_zero(self):
        state = model_init(DESK, np.random.default_rng(1))
        for k, p in state.params.items():
            assert np.array_equal(state.ema[k], p.data)
        assert state.step == 0

    def test_classifier_width(self):
        cfg = BackboneConfig(num_classes=14)
        state = model_init(cfg, np.random.default_rng(2))
        assert state.params["classifier.w"].shape == (14, 64)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BackboneConfig(stage_channels=(8, 16, 32))
        with pytest.raises(ValueError):
            BackboneConfig(num_classes=0)


class TestForwardStages:
    def test_composition(self):
        state = model_init(DESK, np.random.default_rng(3))
        x = Tensor(np.random.default_rng(4).normal(size=(2, 1, 32, 32)))
        full = forward_stages(state, x, 1, 4)
        half = forward_stages(state, forward_stages(state, x, 1, 2), 3, 4)
        assert np.allclose(full.data, half.data, atol=1e-12)

    def test_spatial_extents(self):
        state = model_init(DESK, np.random.default_rng(5))
        x = Tensor(np.random.default_rng(6).normal(size=(1, 1, 64, 64)))
        z2 = forward_stages(state, x, 1, 2)
        assert z2.shape == (1, 16, 16, 16)
        f = forward_stages(state, z2, 3, 4)
        assert f.shape == (1, 64, 8, 8)

    def test_invalid_range(self):
        state = model_init(DESK, np.random.default_rng(7))
        with pytest.raises(ValueError):
            forward_stages(state, Tensor.zeros((1, 1, 8, 8)), 3, 2)

    def test_batch_norm_path_runs_and_tracks_buffers(self):
        cfg = BackboneConfig(norm="batch", use_instance_norm_in_early_stages=True)
        state = model_init(cfg, np.random.default_rng(8))
        # IBN mix: buffers exist only for stages 3-4
        assert "stage3.block0.norm.running_mean" in state.buffers
        assert "stage1.block0.norm.running_mean" not in state.buffers
        x = Tensor(np.random.default_rng(9).normal(size=(4, 1, 16, 16)))
        before = state.buffers["stage3.block0.norm.running_mean"].copy()
        forward_stages(state, x, 1, 4, training=True)
        after = state.buffers["stage3.block0.norm.running_mean"]
        assert not np.array_equal(before, after)
        # eval mode must not touch buffers and must be deterministic
        frozen = after.copy()
        out1 = forward_stages(state, x, 1, 4, training=False)
        out2 = forward_stages(state, x, 1, 4, training=False)
        assert np.array_equal(out1.data, out2.data)
        assert np.array_equal(state.buffers["stage3.block0.norm.running_mean"], frozen)


class TestClassify:
    def test_zero_weights_give_half(self):
        state = model_init(DESK, np.random.default_rng(10))
        state.params["classifier.w"].data[:] = 0.0
        state.params["classifier.b"].data[:] = 0.0
        _, probs = classify(state, Tensor(np.random.default_rng(11).normal(size=(2, 64, 4, 4))))
        assert np.allclose(probs.data, 0.5)

    def test_saturating_bias(self):
        state = model_init(DESK, np.random.default_rng(12))
        state.params["classifier.w"].data[:] = 0.0
        state.params["classifier.b"].data[:] = 20.0
        _, probs = classify(state, Tensor.zeros((1, 64, 2, 2)))
        assert np.all(probs.data > 0.9999)

    def test_single_feature_linear(self):
        cfg = BackboneConfig(stage_channels=(2, 2, 2, 1), num_classes=1)
        state = model_init(cfg, np.random.default_rng(13))
        state.params["classifier.w"].data[:] = 2.0
        state.params["classifier.b"].data[:] = -1.0
        logits, probs = classify(state, Tensor.full((1, 1, 2, 2), 3.0))
        assert logits.data[0, 0] == pytest.approx(2.0 * 3.0 - 1.0)
        assert 0.0 < probs.data[0, 0] < 1.0

    def test_channel_mismatch(self):
        state = model_init(DESK, np.random.default_rng(14))
        with pytest.raises(ValueError):
            classify(state, Tensor.zeros((1, 32, 4, 4)))


class TestForwardDual:
    def test_identity_when_disabled_and_same_input(self):
        state = model_init(DESK, np.random.default_rng(15))
        x = Tensor(np.random.default_rng(16).normal(size=(2, 1, 32, 32)))
        out = forward_dual(state, None, x, x, np.arange(2), SrmFlConfig(), use_srm_fl=False)
        assert np.array_equal(out.features_stylized.data, out.features_clean.data)
        assert np.array_equal(out.probs_stylized.data, out.probs_clean.data)

    def test_pairing_must_be_permutation(self):
        state = model_init(DESK, np.random.default_rng(17))
        x = Tensor(np.random.default_rng(18).normal(size=(2, 1, 16, 16)))
        with pytest.raises(ValueError):
            forward_dual(state, None, x, x, np.array([0, 0]), SrmFlConfig(), use_srm_fl=False)

    def test_swap_pairing_exchanges_partner_rows(self):
        state = model_init(DESK, np.random.default_rng(19))
        rng = np.random.default_rng(20)
        x = Tensor(rng.normal(size=(2, 1, 16, 16)))
        z1 = forward_stages(state, x, 1, 2)
        z2 = T.take(z1, np.array([1, 0]), axis=0)
        assert np.array_equal(z2.data[0], z1.data[1])
        assert np.array_equal(z2.data[1], z1.data[0])

    def test_identity_style_override_reduces_to_plain_branch(self):
        # nets overridden to emit the partner's stats with identity pairing
        # make SRM-FL a per-instance adain onto itself: output equals plain IN path
        state = model_init(DESK, np.random.default_rng(21))
        rng = np.random.default_rng(22)
        x = Tensor(rng.normal(size=(1, 1, 16, 16)))
        z1 = forward_stages(state, x, 1, 2)
        nets = style_nets_init(16, 4, zero_init=True)
        from styledg.stylestats import channel_stats

        st = channel_stats(z1)
        nets.gamma_net[-1].bias.data[:] = st.std[0]
        nets.beta_net[-1].bias.data[:] = st.mean[0]
        out_with = forward_dual(state, nets, x, x, np.arange(1), SrmFlConfig(), use_srm_fl=True)
        out_without = forward_dual(state, None, x, x, np.arange(1), SrmFlConfig(), use_srm_fl=False)
        assert np.allclose(out_with.features_stylized.data, out_without.features_stylized.data,
                           atol=1e-5)

    def test_predefined_embeddings_path(self):
        state = model_init(DESK, np.random.default_rng(23))
        x = Tensor(np.random.default_rng(24).normal(size=(4, 1, 16, 16)))
        cfg = SrmFlConfig(embeddings="predefined")
        out = forward_dual(state, None, x, x, np.array([1, 2, 3, 0]), cfg, use_srm_fl=True)
        assert out.style_triple is None
        assert out.probs_stylized.shape == (4, DESK.num_classes)


class TestEma:
    def test_decay_one_fixed_point(self):
        state = model_init(DESK, np.random.default_rng(25))
        before = {k: v.copy() for k, v in state.ema.items()}
        state.params["classifier.b"].data += 1.0
        ema_update(state, 1.0)
        for k in before:
            assert np.array_equal(state.ema[k], before[k])

    def test_decay_zero_copies_live(self):
        state = model_init(DESK, np.random.default_rng(26))
        state.params["classifier.b"].data += 1.0
        ema_update(state, 0.0)
        assert np.array_equal(state.ema["classifier.b"], state.params["classifier.b"].data)

    def test_scalar_worked_example(self):
        state = model_init(BackboneConfig(stage_channels=(2, 2, 2, 2), num_classes=1),
                           np.random.default_rng(27))
        state.ema["classifier.b"][:] = 0.0
        state.params["classifier.b"].data[:] = 2.0
        ema_update(state, 0.997)
        assert state.ema["classifier.b"][0] == pytest.approx(0.006)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        state = model_init(DESK, np.random.default_rng(28))
        nets = style_nets_init(16, 4, np.random.default_rng(29))
        state.step = 123
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, state, nets)
        loaded, loaded_nets = load_checkpoint(path)
        assert loaded.step == 123
        assert loaded.cfg == state.cfg
        for k, p in state.params.items():
            assert np.array_equal(loaded.params[k].data, p.data)
            assert np.array_equal(loaded.ema[k], state.ema[k])
        for k, p in nets.parameters().items():
            assert np.array_equal(loaded_nets.parameters()[k].data, p.data)

    def test_roundtrip_without_nets(self, tmp_path):
        state = model_init(DESK, np.random.default_rng(30))
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, state)
        loaded, loaded_nets = load_checkpoint(path)
        assert loaded_nets is None
        assert loaded.num_parameters() == state.num_parameters()
