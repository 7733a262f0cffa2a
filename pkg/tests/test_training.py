import numpy as np
import pytest

from tomoheight.config import config_from_dict
from tomoheight.covariance import fit_feature_stats
from tomoheight.dataset import HeightQuantizer, PatchDataset, PatchSet
from tomoheight.network import UNetConfig, init_model, lr_at, unet_forward
from tomoheight.training import (
    TrainingDiverged,
    bias,
    evaluate_prediction,
    fine_tune,
    joint_histogram,
    predict_map,
    rmse,
    train,
)


def toy_dataset(n_patches=8, w=16, m=3, k=4, seed=0, mode="HV"):
    """Labels follow feature channel 0, so a tiny net can learn the task."""
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((n_patches, w, w, m)).astype(np.float32)
    ramp = np.linspace(0, k - 1e-3, w)
    base = (ramp[None, :, None] + ramp[None, None, :]) / 2
    labels = np.clip(base + rng.integers(0, k, (n_patches, 1, 1)), 0, k - 1)
    labels = labels.astype(np.int32)
    feats[..., 0] = labels + 0.05 * rng.standard_normal((n_patches, w, w))

    def subset(sl, split):
        return PatchSet(
            features=feats[sl],
            labels={"chm": labels[sl]},
            origins=np.zeros((len(feats[sl]), 2), dtype=np.int64),
            split=split,
        )

    splits = {
        "train": subset(slice(0, n_patches - 2), "train"),
        "val": subset(slice(n_patches - 2, n_patches - 1), "val"),
        "test": subset(slice(n_patches - 1, n_patches), "test"),
    }
    return PatchDataset(
        splits=splits,
        quantizers={"chm": HeightQuantizer(h_min=0.0, step=1.0, k=k)},
        stats=fit_feature_stats(feats[:n_patches - 2]),
        mode=mode,
        window=1,
        seed=seed,
        image_shape=(w, w),
    )


def toy_config(epochs=20, lr=0.01, batch=3, base=4, levels=3):
    return config_from_dict({
        "mode": "HV",
        "patch": 16,
        "window": 1,
        "network": {"base_channels": base, "levels": levels},
        "training": {"lr": lr, "batch": batch, "epochs": epochs, "seed": 0},
    })


class TestTrainLoop:
    def test_learns_the_toy_task(self):
        ds = toy_dataset()
        state, report = train(ds, toy_config(epochs=60), seed=1)
        assert report.rows[-1].val_acc > 0.75
        assert report.rows[-1].train_loss < report.rows[0].train_loss / 2

    def test_zero_epochs_returns_initialized_state(self):
        ds = toy_dataset()
        state, report = train(ds, toy_config(epochs=0), seed=1)
        assert report.rows == []
        assert state.epoch == 0
        fresh = init_model(state.config, state.quantizers, seed=1,
                           feature_stats=ds.stats, mode=ds.mode)
        assert all(np.array_equal(state.params[k], fresh.params[k])
                   for k in state.params)

    def test_same_seed_reproduces_loss_curve(self):
        ds = toy_dataset()
        _, rep_a = train(ds, toy_config(epochs=6), seed=5)
        _, rep_b = train(ds, toy_config(epochs=6), seed=5)
        assert [r.train_loss for r in rep_a.rows] == [r.train_loss for r in rep_b.rows]
        _, rep_c = train(ds, toy_config(epochs=6), seed=6)
        assert [r.train_loss for r in rep_c.rows] != [r.train_loss for r in rep_a.rows]

    def test_lr_column_reproduces_schedule(self):
        ds = toy_dataset()
        cfg = toy_config(epochs=7)
        cfg.training.decay_factor = 0.5
        cfg.training.decay_period = 3
        _, report = train(ds, cfg, seed=0)
        epochs = [r.epoch for r in report.rows]
        assert epochs == sorted(epochs) and len(set(epochs)) == len(epochs)
        for r in report.rows:
            assert r.lr == lr_at(r.epoch, cfg.training.lr, 0.5, 3)

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergence_aborts_with_last_good_state(self):
        ds = toy_dataset()
        with pytest.raises(TrainingDiverged) as err:
            train(ds, toy_config(epochs=30, lr=1e9), seed=1)
        assert err.value.state is not None
        assert np.all(np.isfinite(err.value.state.params["head.w"]))

    def test_empty_split_rejected(self):
        ds = toy_dataset()
        ds.splits["val"] = ds.val.subset(np.array([], dtype=np.int64))
        with pytest.raises(ValueError, match="nonempty"):
            train(ds, toy_config(epochs=1))

    def test_best_checkpoint_selected_by_val_loss(self):
        ds = toy_dataset()
        state, report = train(ds, toy_config(epochs=10), seed=2)
        losses = [r.val_loss for r in report.rows]
        assert report.best_epoch == int(np.argmin(losses))
        assert report.best_val_loss == min(losses)


class TestFineTune:
    def test_same_class_count_reloads_everything(self):
        ds = toy_dataset(seed=0)
        pre, _ = train(ds, toy_config(epochs=3), seed=1)
        ds2 = toy_dataset(seed=9)
        tuned, _ = fine_tune(pre, ds2, toy_config(epochs=0), seed=2)
        for k in pre.params:
            assert np.array_equal(tuned.params[k], pre.params[k])

    def test_changed_class_count_reinitializes_head_only(self):
        ds = toy_dataset(k=4)
        pre, _ = train(ds, toy_config(epochs=2), seed=1)
        ds2 = toy_dataset(k=6, seed=3)
        tuned, _ = fine_tune(pre, ds2, toy_config(epochs=0), seed=2)
        assert tuned.config.class_counts == (6,)
        assert tuned.params["head.w"].shape[-1] == 6
        for k in pre.params:
            if not k.startswith("head"):
                assert np.array_equal(tuned.params[k], pre.params[k])

    def test_feature_count_mismatch_rejected(self):
        ds = toy_dataset(m=3)
        pre, _ = train(ds, toy_config(epochs=1), seed=1)
        ds2 = toy_dataset(m=5, seed=2)
        with pytest.raises(ValueError, match="M=5"):
            fine_tune(pre, ds2, toy_config(epochs=1))

    def test_finetune_uses_scaled_lr(self):
        ds = toy_dataset()
        pre, _ = train(ds, toy_config(epochs=1), seed=1)
        _, report = fine_tune(pre, ds, toy_config(epochs=2), seed=2)
        assert report.rows[0].lr == pytest.approx(0.001)


def random_state(m=3, k=4, seed=0, targets=("chm",), levels=3, base=4):
    counts = tuple(k if isinstance(k, int) else k for _ in targets)
    cfg = UNetConfig(in_channels=m, class_counts=counts, base_channels=base,
                     levels=levels)
    quant = {t: HeightQuantizer(h_min=0.0, step=1.0, k=c)
             for t, c in zip(targets, counts)}
    return init_model(cfg, quant, seed=seed)


class TestPredictMap:
    def test_single_tile_matches_direct_argmax(self):
        state = random_state()
        feats = np.random.default_rng(0).standard_normal((16, 16, 3)).astype(np.float32)
        pred = predict_map(state, feats, tile=16, overlap=0)["chm"]
        logits = unet_forward(state.config, state.params, feats[None].astype(np.float32))
        direct = state.quantizers["chm"].dequantize(logits[0].argmax(axis=-1))
        np.testing.assert_array_equal(pred, direct)

    def test_zero_overlap_equals_per_tile_argmax(self):
        state = random_state()
        rng = np.random.default_rng(1)
        feats = rng.standard_normal((32, 48, 3)).astype(np.float32)
        pred = predict_map(state, feats, tile=16, overlap=0)["chm"]
        quant = state.quantizers["chm"]
        for r in range(0, 32, 16):
            for c in range(0, 48, 16):
                logits = unet_forward(
                    state.config, state.params, feats[None, r:r + 16, c:c + 16]
                )
                expect = quant.dequantize(logits[0].argmax(axis=-1))
                np.testing.assert_array_equal(pred[r:r + 16, c:c + 16], expect)

    def test_predictions_are_class_centers(self):
        state = random_state(k=5)
        feats = np.random.default_rng(2).standard_normal((32, 32, 3)).astype(np.float32)
        pred = predict_map(state, feats, tile=16)["chm"]
        centers = state.quantizers["chm"].dequantize(np.arange(5))
        assert set(np.unique(pred)) <= set(centers)

    def test_interior_invariant_to_grid_offset(self):
        state = random_state()
        feats = np.random.default_rng(3).standard_normal((80, 80, 3)).astype(np.float32)
        base = predict_map(state, feats, tile=16, overlap=8)["chm"]
        moved = predict_map(state, feats, tile=16, overlap=8, grid_offset=(8, 8))["chm"]
        np.testing.assert_array_equal(base[32:-32, 32:-32], moved[32:-32, 32:-32])

    def test_scene_smaller_than_tile_rejected(self):
        state = random_state()
        with pytest.raises(ValueError, match="smaller"):
            predict_map(state, np.zeros((8, 8, 3), dtype=np.float32), tile=16)

    def test_unified_state_predicts_both_targets(self):
        cfg = UNetConfig(in_channels=3, class_counts=(4, 6), base_channels=4, levels=2)
        quant = {
            "chm": HeightQuantizer(h_min=0.0, step=1.0, k=4),
            "dtm": HeightQuantizer(h_min=2.0, step=0.5, k=6),
        }
        state = init_model(cfg, quant, seed=0)
        feats = np.random.default_rng(4).standard_normal((16, 16, 3)).astype(np.float32)
        preds = predict_map(state, feats, tile=16, overlap=0)
        assert set(preds) == {"chm", "dtm"}
        assert preds["dtm"].min() >= 2.0


class TestMetrics:
    def test_rmse_identity_and_offset(self):
        ref = np.random.default_rng(0).uniform(0, 10, (6, 6))
        assert rmse(ref, ref) == 0.0
        assert rmse(ref + 2.0, ref) == pytest.approx(2.0, rel=1e-12)
        assert bias(ref + 2.0, ref) == pytest.approx(2.0, rel=1e-12)

    def test_rmse_against_handwritten_loops(self):
        rng = np.random.default_rng(7)
        pred = rng.uniform(0, 5, (5, 5))
        ref = rng.uniform(0, 5, (5, 5))
        acc = 0.0
        for i in range(5):
            for j in range(5):
                acc += (pred[i, j] - ref[i, j]) ** 2
        assert rmse(pred, ref) == pytest.approx(np.sqrt(acc / 25), rel=1e-13)

    def test_rmse_masking_and_errors(self):
        pred = np.ones((2, 2))
        ref = np.zeros((2, 2))
        mask = np.array([[True, False], [False, False]])
        assert rmse(pred, ref, mask) == 1.0
        with pytest.raises(ValueError, match="shape"):
            rmse(np.ones((2, 2)), np.ones((3, 3)))
        with pytest.raises(ValueError, match="valid"):
            rmse(pred, ref, np.zeros((2, 2), dtype=bool))

    def test_perfect_prediction_gives_diagonal_histogram(self):
        q = HeightQuantizer(h_min=0.0, step=1.0, k=4)
        ref = np.array([[0.5, 1.5], [2.5, 3.5]])
        hist = joint_histogram(ref, ref, q)
        np.testing.assert_array_equal(hist, np.eye(4, dtype=np.int64))

    def test_two_class_histogram_hand_count(self):
        q = HeightQuantizer(h_min=0.0, step=1.0, k=2)
        pred = np.array([[0.1, 1.2], [1.9, 1.5]])
        ref = np.array([[0.4, 0.6], [1.1, 1.7]])
        hist = joint_histogram(pred, ref, q)
        np.testing.assert_array_equal(hist, [[1, 1], [0, 2]])

    def test_histogram_total_equals_pixels(self):
        q = HeightQuantizer(h_min=0.0, step=1.0, k=6)
        rng = np.random.default_rng(1)
        pred = rng.uniform(0, 6, (9, 9))
        ref = rng.uniform(0, 6, (9, 9))
        report = evaluate_prediction(pred, ref, q)
        assert report.histogram.sum() == report.n_pixels == 81

    def test_nan_pixels_masked_out(self):
        q = HeightQuantizer(h_min=0.0, step=1.0, k=4)
        pred = np.array([[1.0, np.nan], [2.0, 3.0]])
        ref = np.full((2, 2), 1.0)
        report = evaluate_prediction(pred, ref, q)
        assert report.n_pixels == 3
        assert report.n_masked == 1
