import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model_config
from rotenc import autodiff as ad
from rotenc.autodiff import ParameterStore
from rotenc.data import SplitSpec, split as split_records
from rotenc.encoder3d import EncoderConfig
from rotenc.errors import Diverged, InvalidConfig, StaleGradient, TaskMismatch
from rotenc.gnn import GnnConfig
from rotenc.model import Model, ModelConfig
from rotenc.synthetic import make_records
from rotenc.trainer import (
    AdamWState,
    Checkpoint,
    TrainConfig,
    adamw_step,
    checkpoint_from_model,
    config_from_dict,
    config_to_dict,
    evaluate,
    evaluate_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
    _metrics_from_predictions,
)


def smoke_config(records_seed=5, **overrides) -> TrainConfig:
    defaults = dict(
        model=tiny_model_config(),
        split=SplitSpec(mode="holdout", train_fraction=0.75, seed=1),
        epochs=2,
        batch_size=8,
        lr=3e-3,
        seed=11,
        lambda_l1=1e-4,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestAdamW:
    def test_zero_gradient_is_pure_decay(self):
        store = ParameterStore()
        theta = np.array([1.0, -2.0, 0.5])
        p = store.add("w", theta.copy())
        p._grad = np.zeros(3)
        cfg = smoke_config(lr=1e-3, weight_decay=0.01)
        adamw_step(store, AdamWState(), cfg)
        np.testing.assert_array_equal(p.data, theta * (1.0 - 1e-5))

    def test_single_step_matches_hand_recurrence(self):
        # f = theta^2 at theta = 1: gradient 2; replay the update by hand
        store = ParameterStore()
        p = store.add("w", np.array([1.0]))
        p._grad = np.array([2.0])
        cfg = smoke_config(lr=1e-3, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8)
        adamw_step(store, AdamWState(), cfg)
        theta = 1.0 * (1.0 - 1e-3 * 0.01)
        m = 0.1 * 2.0
        v = 0.001 * 4.0
        m_hat = m / (1 - 0.9)
        v_hat = v / (1 - 0.999)
        expected = theta - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(p.data, [expected], atol=1e-12)

    @given(st.floats(0.1, 50.0))
    @settings(max_examples=20, deadline=None)
    def test_first_step_magnitude_is_lr(self, g):
        # bias-corrected Adam with wd=0: first update is lr * g/(|g| + eps)
        store = ParameterStore()
        p = store.add("w", np.array([3.0]))
        p._grad = np.array([g])
        cfg = smoke_config(lr=1e-3, weight_decay=0.0)
        adamw_step(store, AdamWState(), cfg)
        assert abs(abs(3.0 - p.data[0]) - 1e-3) <= 1e-9

    def test_stale_gradient_rejected(self):
        store = ParameterStore()
        store.add("w", np.ones(2))
        with pytest.raises(StaleGradient):
            adamw_step(store, AdamWState(), smoke_config())

    def test_deterministic_across_runs(self):
        def run():
            store = ParameterStore()
            p = store.add("w", np.linspace(-1, 1, 6))
            state = AdamWState()
            cfg = smoke_config(lr=2e-3)
            for step in range(5):
                p._grad = np.sin(np.arange(6.0) + step)
                adamw_step(store, state, cfg)
            return p.data.copy()

        assert np.array_equal(run(), run())


class TestMetrics:
    def test_perfect_predictions(self):
        preds = np.array([[1.0], [2.0], [3.0]])
        m = _metrics_from_predictions(preds, preds.copy(), ("e",), "test")
        assert m.mae["e"] == 0.0 and m.rmse["e"] == 0.0 and m.r2["e"] == 1.0

    def test_predicting_the_mean_gives_zero_r2(self):
        targets = np.array([[1.0], [2.0], [3.0], [6.0]])
        preds = np.full_like(targets, targets.mean())
        m = _metrics_from_predictions(preds, targets, ("e",), "test")
        assert abs(m.r2["e"]) <= 1e-12

    def test_mae_arithmetic(self):
        preds = np.array([[1.0], [3.0]])
        targets = np.array([[2.0], [2.0]])
        m = _metrics_from_predictions(preds, targets, ("e",), "test")
        assert m.mae["e"] == 1.0
        assert m.rmse["e"] >= m.mae["e"] >= 0.0

    def test_metric_ordering_and_r2_bound(self):
        rng = np.random.default_rng(3)
        targets = rng.normal(size=(12, 1))
        preds = targets + rng.normal(size=(12, 1)) * 0.3
        m = _metrics_from_predictions(preds, targets, ("e",), "test")
        assert m.rmse["e"] >= m.mae["e"] >= 0.0
        assert m.r2["e"] <= 1.0


class TestTraining:
    def test_smoke_reduces_loss(self):
        records = make_records(40, seed=5)
        cfg = smoke_config(epochs=5)
        ckpt, history = train(cfg, records)
        assert history[-1]["train_loss"] <= 0.5 * history[0]["train_loss"]
        assert isinstance(ckpt, Checkpoint)

    def test_bit_identical_reruns(self):
        records = make_records(20, seed=6)
        cfg = smoke_config(epochs=2)
        _, h1 = train(cfg, records)
        _, h2 = train(cfg, records)
        assert [e["train_loss"] for e in h1] == [e["train_loss"] for e in h2]
        assert h1 == h2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
    def test_divergence_reported_with_location(self):
        records = make_records(12, seed=7)
        cfg = smoke_config(epochs=2, lr=1e80)
        with pytest.raises(Diverged) as exc:
            train(cfg, records)
        assert exc.value.epoch >= 0 and exc.value.batch >= 0

    def test_kfold_driver(self):
        records = make_records(12, seed=8)
        cfg = smoke_config(split=SplitSpec(mode="kfold", k_folds=3, seed=2), epochs=1)
        ckpt, history = train(cfg, records)
        assert {e["fold"] for e in history} == {0, 1, 2}
        assert isinstance(ckpt, Checkpoint)

    def test_mixed_bondedness_rejected(self):
        records = make_records(4, seed=9)
        from rotenc.data import MoleculeRecord

        bonded = MoleculeRecord(id="b", atomic_numbers=[1, 1],
                                coords=np.array([[0.0, 0, 0], [1.0, 0, 0]]),
                                bonds=[(0, 1, 1)], targets={"rg": 0.5})
        with pytest.raises(InvalidConfig):
            train(smoke_config(epochs=1), records + [bonded])

    def test_huge_l1_collapses_fused_vector(self):
        # penalty domination is directional: the Adam step size caps how far
        # u can shrink in a few epochs, but it must shrink, with finite loss
        records = make_records(16, seed=10)
        base = smoke_config(epochs=10, lr=0.1, lambda_l1=0.0)
        heavy = smoke_config(epochs=10, lr=0.1, lambda_l1=1e6)
        norms = {}
        for name, cfg in (("base", base), ("heavy", heavy)):
            ckpt, history = train(cfg, records)
            model, normalizer = model_from_checkpoint(ckpt)
            u_norms = []
            for record in records[:6]:
                _, u = model.forward(model.graph_for(record), model.cloud_for(record))
                u_norms.append(np.sum(np.abs(u.data)))
            norms[name] = np.mean(u_norms)
            assert np.isfinite(history[-1]["train_loss"])
        assert norms["heavy"] < 0.7 * norms["base"]

    def test_l1_pressure_is_directional(self):
        records = make_records(24, seed=11)
        norms = {}
        for lam in (0.0, 1e-2):
            ckpt, _ = train(smoke_config(epochs=3, lambda_l1=lam), records)
            model, _ = model_from_checkpoint(ckpt)
            held_out = make_records(6, seed=999)
            u_norms = []
            for record in held_out:
                _, u = model.forward(model.graph_for(record), model.cloud_for(record))
                u_norms.append(np.sum(np.abs(u.data)))
            norms[lam] = np.mean(u_norms)
        assert norms[1e-2] < norms[0.0]

    def test_average_loss_objective_trains(self):
        records = make_records(10, seed=12)
        cfg = smoke_config(epochs=1, model=tiny_model_config(objective="average_loss"))
        ckpt, history = train(cfg, records)
        assert np.isfinite(history[-1]["train_loss"])


class TestCheckpoint:
    def test_roundtrip_bit_identical_predictions(self, tmp_path):
        records = make_records(10, seed=13)
        ckpt, _ = train(smoke_config(epochs=1), records)
        path = tmp_path / "model.rotenc"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        m1, _ = model_from_checkpoint(ckpt)
        m2, _ = model_from_checkpoint(loaded)
        for record in records[:4]:
            assert np.array_equal(m1.predict(record), m2.predict(record))

    def test_magic_header(self, tmp_path):
        records = make_records(6, seed=14)
        ckpt, _ = train(smoke_config(epochs=1), records)
        path = tmp_path / "model.rotenc"
        save_checkpoint(ckpt, path)
        assert path.read_bytes()[:7] == b"ROTENC1"
        with pytest.raises(InvalidConfig):
            bad = tmp_path / "junk.rotenc"
            bad.write_bytes(b"NOTACKP" + b"\x00" * 16)
            load_checkpoint(bad)

    def test_config_dict_roundtrip(self):
        cfg = smoke_config()
        back = config_from_dict(config_to_dict(cfg))
        assert back == cfg

    def test_evaluate_from_checkpoint(self, tmp_path):
        records = make_records(12, seed=15)
        cfg = smoke_config(epochs=1)
        ckpt, _ = train(cfg, records)
        metrics = evaluate(ckpt, records, split_name="all")
        assert set(metrics.mae) == {"rg"}
        assert metrics.rmse["rg"] >= metrics.mae["rg"] >= 0.0
        assert metrics.r2["rg"] <= 1.0

    def test_task_mismatch_detected(self):
        records = make_records(8, seed=16)
        ckpt, _ = train(smoke_config(epochs=1), records)
        model, normalizer = model_from_checkpoint(ckpt)
        from rotenc.data import MoleculeRecord

        alien = MoleculeRecord(id="alien", atomic_numbers=[1, 6],
                               coords=np.array([[0.0, 0, 0], [1.0, 0, 0]]), bonds=None,
                               targets={"other": 1.0})
        with pytest.raises(TaskMismatch):
            evaluate_model(model, normalizer, [alien])


class TestAblations:
    def test_toggles_produce_distinct_d_u(self):
        records = make_records(10, seed=17)
        d_us = {}
        for name, overrides in {
            "full": {},
            "no_3d": {"ablate_3d": True},
            "no_features": {"ablate_features": True},
            "no_pointnet": {"ablate_pointwise": True},
        }.items():
            cfg = smoke_config(epochs=1, model=tiny_model_config(**overrides))
            ckpt, history = train(cfg, records)
            assert np.isfinite(history[-1]["train_loss"]), name
            model, _ = model_from_checkpoint(ckpt)
            d_us[name] = model.cfg.d_u
            _, u = model.forward(model.graph_for(records[0]), model.cloud_for(records[0]))
            assert u.data.shape == (model.cfg.d_u,), name
        # the three ablations have pairwise-distinct fused widths
        assert len({d_us["no_3d"], d_us["no_features"], d_us["no_pointnet"]}) == 3
        assert d_us["no_3d"] == tiny_model_config().g_dim
        assert d_us["no_pointnet"] == tiny_model_config().g_dim + 3 + tiny_model_config().encoder.embed_dim

    def test_features_ablation_narrows_edge_width(self):
        records = make_records(6, seed=18)
        cfg = smoke_config(epochs=1, model=tiny_model_config(ablate_features=True))
        ckpt, _ = train(cfg, records)
        model, _ = model_from_checkpoint(ckpt)
        assert model.d_edge == 1
        assert model.graph_for(records[0]).edge_feats.shape[1] == 1


class TestNormalizerIsolation:
    def test_no_test_leakage(self):
        # recompute the normalizer from the train split and compare with the
        # checkpoint's: statistics must not involve held-out records
        from rotenc.data import normalize_targets

        records = make_records(20, seed=19)
        cfg = smoke_config(epochs=1)
        ckpt, _ = train(cfg, records)
        train_idx, _ = split_records(records, cfg.split)
        expected = normalize_targets(records, train_idx)
        np.testing.assert_array_equal(ckpt.normalizer.mean, expected.mean)
        np.testing.assert_array_equal(ckpt.normalizer.std, expected.std)
