import numpy as np
import pytest

from tomoheight.covariance import FeatureStats
from tomoheight.dataset import HeightQuantizer
from tomoheight.network import (
    GradientError,
    ModelState,
    UNetConfig,
    conv_layer_specs,
    count_conv_layers,
    init_model,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    unet_backward,
    unet_forward,
    xavier_init,
)

TINY = UNetConfig(in_channels=4, class_counts=(5,), base_channels=4, levels=3)


def tiny_params(seed=1, dtype=np.float64):
    return xavier_init(TINY, seed, dtype=dtype)


class TestArchitecture:
    def test_default_config_has_23_conv_layers(self):
        cfg = UNetConfig(in_channels=52, class_counts=(60,))
        assert count_conv_layers(cfg) == 23

    def test_conv_count_follows_levels(self):
        # 2 per encoder level + 3 per decoder level + head = 5L - 2
        for levels in (2, 3, 4, 5):
            cfg = UNetConfig(in_channels=8, class_counts=(4,), levels=levels)
            assert count_conv_layers(cfg) == 5 * levels - 2

    def test_channel_doubling_and_halving(self):
        cfg = UNetConfig(in_channels=52, class_counts=(60,))
        specs = dict((s[0], s) for s in conv_layer_specs(cfg))
        assert specs["enc0.conv1"][2:] == (52, 32)
        assert specs["enc4.conv2"][2:] == (512, 512)
        assert specs["dec0.up"][2:] == (512, 256)
        assert specs["dec0.conv1"][2:] == (512, 256)
        assert specs["dec3.conv2"][2:] == (32, 32)
        assert specs["head"][1:] == (1, 32, 60)

    def test_output_shape_and_bottleneck(self):
        cfg = UNetConfig(in_channels=6, class_counts=(9,), base_channels=4, levels=5)
        params = xavier_init(cfg, 0)
        x = np.random.default_rng(0).standard_normal((2, 64, 64, 6)).astype(np.float32)
        logits, cache = unet_forward(cfg, params, x, want_cache=True)
        assert logits.shape == (2, 64, 64, 9)
        assert cache["enc4.conv2.pre"].shape[1:3] == (4, 4)  # 64 / 2**4

    def test_indivisible_size_rejected(self):
        params = tiny_params()
        x = np.zeros((1, 10, 10, 4))
        with pytest.raises(ValueError, match="divisible"):
            unet_forward(TINY, params, x)

    def test_zero_input_zero_bias_gives_zero_logits(self):
        params = tiny_params()
        x = np.zeros((1, 8, 8, 4))
        logits = unet_forward(TINY, params, x)
        np.testing.assert_array_equal(logits, 0.0)

    def test_forward_is_deterministic(self):
        params = tiny_params()
        x = np.random.default_rng(3).standard_normal((2, 8, 8, 4))
        a = unet_forward(TINY, params, x)
        b = unet_forward(TINY, params, x)
        assert np.array_equal(a, b)


class TestXavier:
    def test_bound_example_32_to_64(self):
        # fan_in = 9*32 = 288, fan_out = 9*64 = 576 -> sqrt(6/864) = 1/12
        cfg = UNetConfig(in_channels=32, class_counts=(4,), base_channels=32, levels=2)
        params = xavier_init(cfg, 0)
        w = params["enc1.conv1.w"]  # 3x3 conv 32 -> 64
        assert w.shape == (3, 3, 32, 64)
        bound = 1.0 / 12.0
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() >= 0.95 * bound

    def test_same_seed_bitwise_identical(self):
        a = xavier_init(TINY, seed=7)
        b = xavier_init(TINY, seed=7)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = xavier_init(TINY, seed=8)
        assert not np.array_equal(a["enc0.conv1.w"], c["enc0.conv1.w"])

    def test_empirical_variance_matches_uniform_law(self):
        cfg = UNetConfig(in_channels=32, class_counts=(4,), base_channels=32, levels=3)
        params = xavier_init(cfg, 3)
        w = params["enc1.conv2.w"]  # 64 -> 64: 36864 weights
        assert w.size >= 10_000
        fan = 9 * 64 + 9 * 64
        expected = 2.0 / fan
        assert w.var() == pytest.approx(expected, rel=0.10)

    def test_biases_zero(self):
        params = xavier_init(TINY, 0)
        for name, arr in params.items():
            if name.endswith(".b"):
                np.testing.assert_array_equal(arr, 0.0)


class TestCrossEntropy:
    def test_uniform_logits_give_log_k(self):
        logits = np.zeros((2, 4, 4, 7))
        labels = np.random.default_rng(0).integers(0, 7, (2, 4, 4))
        loss, grad = softmax_cross_entropy(logits, labels)
        assert loss == pytest.approx(np.log(7), rel=1e-12)

    def test_confident_correct_logit_drives_loss_to_zero(self):
        logits = np.zeros((1, 1, 1, 3))
        logits[..., 1] = 50.0
        loss, _ = softmax_cross_entropy(logits, np.array([[[1]]]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((1, 4, 4, 2))
        labels = rng.integers(0, 2, (1, 4, 4))
        labels[0, 0, 0] = -1
        loss, grad = softmax_cross_entropy(logits, labels)
        h = 1e-6
        for idx in [(0, 0, 0, 0), (0, 1, 2, 1), (0, 3, 3, 0), (0, 2, 1, 1)]:
            bumped = logits.copy()
            bumped[idx] += h
            lp, _ = softmax_cross_entropy(bumped, labels)
            bumped[idx] -= 2 * h
            lm, _ = softmax_cross_entropy(bumped, labels)
            fd = (lp - lm) / (2 * h)
            assert grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-10)

    def test_ignored_pixels_have_zero_gradient(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((1, 2, 2, 3))
        labels = np.array([[[0, -1], [1, -1]]])
        _, grad = softmax_cross_entropy(logits, labels)
        np.testing.assert_array_equal(grad[0, 0, 1], 0.0)
        np.testing.assert_array_equal(grad[0, 1, 1], 0.0)

    def test_all_ignored_rejected(self):
        with pytest.raises(ValueError, match="ignore"):
            softmax_cross_entropy(np.zeros((1, 1, 1, 2)), np.array([[[-1]]]))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((3, 8, 8, 11)) * 30
        s = softmax(logits)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)


class TestSgd:
    def test_zero_gradient_is_fixed_point(self):
        params = {"w": np.array([1.0, 2.0])}
        vel = {"w": np.zeros(2)}
        sgd_step(params, vel, {"w": np.zeros(2)}, lr=0.1)
        np.testing.assert_array_equal(params["w"], [1.0, 2.0])

    def test_zero_momentum_is_plain_descent(self):
        params = {"w": np.array([1.0])}
        vel = {"w": np.zeros(1)}
        sgd_step(params, vel, {"w": np.array([0.5])}, lr=0.1, momentum=0.0)
        assert params["w"][0] == pytest.approx(1.0 - 0.1 * 0.5, rel=1e-15)

    def test_two_steps_constant_gradient_displacement(self):
        # v1 = g, v2 = 0.9 g + g = 1.9 g -> total displacement lr*g*(1 + 1.9)
        lr, g = 0.01, 2.0
        params = {"w": np.array([0.0])}
        vel = {"w": np.zeros(1)}
        sgd_step(params, vel, {"w": np.array([g])}, lr=lr, momentum=0.9)
        sgd_step(params, vel, {"w": np.array([g])}, lr=lr, momentum=0.9)
        assert params["w"][0] == pytest.approx(-lr * g * 2.9, rel=1e-12)

    def test_nonfinite_gradient_names_parameter(self):
        params = {"dec1.conv1.w": np.zeros(3)}
        vel = {"dec1.conv1.w": np.zeros(3)}
        with pytest.raises(GradientError, match="dec1.conv1.w"):
            sgd_step(params, vel, {"dec1.conv1.w": np.array([1.0, np.nan, 0.0])}, 0.1)


class TestLrSchedule:
    @pytest.mark.parametrize("epoch,expected", [
        (0, 0.01), (199, 0.01), (200, 0.005), (399, 0.005), (400, 0.0025),
    ])
    def test_stepped_decay(self, epoch, expected):
        assert lr_at(epoch) == pytest.approx(expected, rel=1e-12)

    def test_custom_factors(self):
        assert lr_at(10, lr0=1.0, factor=0.1, period=5) == pytest.approx(0.01)


class TestGradCheckSpot:
    """Cheap spot check; the exhaustive sweep lives in the acceptance suite."""

    def test_sampled_parameters_match_finite_differences(self):
        rng = np.random.default_rng(11)
        params = tiny_params(seed=2)
        x = rng.standard_normal((2, 8, 8, 4))
        labels = rng.integers(0, 5, (2, 8, 8)).astype(np.int64)
        labels[0, 0, :2] = -1

        logits, cache = unet_forward(TINY, params, x, want_cache=True)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        grads = unet_backward(TINY, params, cache, dlogits)

        def loss_now():
            lg = unet_forward(TINY, params, x)
            return softmax_cross_entropy(lg, labels)[0]

        for name in ("enc0.conv1.w", "enc2.conv2.w", "dec0.up.w",
                     "dec1.conv2.w", "head.w", "dec0.conv1.b"):
            flat = params[name].reshape(-1)
            g = grads[name].reshape(-1)
            for i in rng.choice(flat.size, size=6, replace=False):
                h = 1e-5
                keep = flat[i]
                flat[i] = keep + h
                lp = loss_now()
                flat[i] = keep - h
                lm = loss_now()
                flat[i] = keep
                fd = (lp - lm) / (2 * h)
                assert abs(g[i] - fd) <= 1e-6 + 1e-4 * max(abs(g[i]), abs(fd))


class TestCheckpoint:
    def make_state(self):
        quant = {"chm": HeightQuantizer(h_min=0.0, step=1.0, k=5)}
        stats = FeatureStats(mean=np.arange(4.0), std=np.ones(4))
        state = init_model(TINY, quant, seed=3, feature_stats=stats, mode="HV")
        state.epoch = 17
        return state

    def test_roundtrip_bitwise(self, tmp_path):
        state = self.make_state()
        # make momentum buffers nonzero so they actually get exercised
        for v in state.velocity.values():
            v += 0.25
        save_checkpoint(state, tmp_path / "ckpt")
        back = load_checkpoint(tmp_path / "ckpt")
        assert back.epoch == 17
        assert back.mode == "HV"
        assert back.config == state.config
        for k in state.params:
            assert back.params[k].tobytes() == state.params[k].tobytes()
            assert back.velocity[k].tobytes() == state.velocity[k].tobytes()
        np.testing.assert_array_equal(back.feature_stats.mean, state.feature_stats.mean)
        assert back.quantizers["chm"] == state.quantizers["chm"]

    def test_forward_identical_after_roundtrip(self, tmp_path):
        state = self.make_state()
        save_checkpoint(state, tmp_path / "ckpt")
        back = load_checkpoint(tmp_path / "ckpt")
        x = np.random.default_rng(0).standard_normal((1, 8, 8, 4)).astype(np.float32)
        a = unet_forward(state.config, state.params, x)
        b = unet_forward(back.config, back.params, x)
        assert np.array_equal(a, b)

    def test_mismatched_quantizer_rejected(self):
        quant = {"chm": HeightQuantizer(h_min=0.0, step=1.0, k=9)}
        with pytest.raises(ValueError, match="class counts"):
            init_model(TINY, quant, seed=0)


class TestUnifiedHead:
    def test_logit_slices_partition_channels(self):
        cfg = UNetConfig(in_channels=4, class_counts=(5, 3), base_channels=4, levels=2)
        quant = {
            "chm": HeightQuantizer(h_min=0.0, step=1.0, k=5),
            "dtm": HeightQuantizer(h_min=0.0, step=1.0, k=3),
        }
        state = init_model(cfg, quant, seed=0)
        slices = state.logit_slices()
        assert slices["chm"] == slice(0, 5)
        assert slices["dtm"] == slice(5, 8)
        assert cfg.out_channels == 8

    def test_group_softmax_independent(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((1, 2, 2, 8))
        for sl in (slice(0, 5), slice(5, 8)):
            np.testing.assert_allclose(
                softmax(logits[..., sl]).sum(axis=-1), 1.0, atol=1e-6
            )

    def test_cross_group_gradient_is_zero(self):
        # the chm loss must not touch dtm logits: finite-difference check
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((1, 2, 2, 8))
        labels = rng.integers(0, 5, (1, 2, 2))
        loss, _ = softmax_cross_entropy(logits[..., :5], labels)
        bumped = logits.copy()
        bumped[..., 6] += 0.37
        loss2, _ = softmax_cross_entropy(bumped[..., :5], labels)
        assert loss == loss2
