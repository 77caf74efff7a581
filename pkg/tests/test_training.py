from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapos import tensor as T
from adapos.errors import ConfigurationError, DivergenceError, UsageError
from adapos.metrics import PseudoDistanceProvider
from adapos.models import AdaPosModel, ModelConfig, load_checkpoint
from adapos.rngs import stream_rng
from adapos.sim import default_environment, generate_dataset, generate_trajectory
from adapos.tensor import ParamSet, Tensor
from adapos.training import (OptimizerState, Strategy, TrainConfig, adamw_step, sample_subset_fixed_n,
                             sample_subset_random_n, siamese_batch_loss, siamese_loss, train,
                             warmup_lr, write_loss_csv)


@pytest.fixture(scope="module")
def data():
    env = default_environment(seed=5)
    ds = generate_dataset(env, generate_trajectory(env, 30 / 6.6 + 1e-6, 6.6, 1.0, seed=6))
    return ds, PseudoDistanceProvider(ds, "fused-geodesic", k=5)


def tiny_model(seed=0):
    return AdaPosModel(ModelConfig.small(a_max=6, d_model=8, heads=2, d_ff=8, stem=2, blocks=(2,),
                                         head_hidden=8), seed=seed)


class TestLoss:
    def test_examples(self):
        assert siamese_loss((0, 0), (3, 4), 5.0) == 0.0
        assert siamese_loss((1, 1), (1, 1), 0.0) == 0.0
        assert siamese_loss((0, 0), (2, 0), 0.0) == 4.0

    def test_batch_mean_and_order_invariance(self):
        rng = np.random.default_rng(0)
        pn, pk, d = rng.normal(size=(7, 2)), rng.normal(size=(7, 2)), rng.uniform(0, 3, 7)
        expected = np.mean([siamese_loss(a, b, c) for a, b, c in zip(pn, pk, d)])
        got = siamese_batch_loss(Tensor(pn), Tensor(pk), d).item()
        assert got == pytest.approx(expected, rel=1e-12)
        perm = rng.permutation(7)
        again = siamese_batch_loss(Tensor(pn[perm]), Tensor(pk[perm]), d[perm]).item()
        assert again == pytest.approx(got, rel=1e-12)

    def test_uniform_weights_equal_mean(self):
        rng = np.random.default_rng(1)
        pn, pk, d = rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), rng.uniform(0, 3, 5)
        a = siamese_batch_loss(Tensor(pn), Tensor(pk), d).item()
        b = siamese_batch_loss(Tensor(pn), Tensor(pk), d, np.ones(5)).item()
        assert a == pytest.approx(b, rel=1e-12)


class TestAdamW:
    def setup_method(self):
        self.params = ParamSet({"w": np.array([1.0, -2.0, 3.0])})
        self.state = OptimizerState.zeros_like(self.params)

    def test_zero_gradient_fixed_point(self):
        new, state = adamw_step(self.params, {"w": np.zeros(3)}, self.state, lr=0.1)
        np.testing.assert_array_equal(new["w"].numpy(), self.params["w"].numpy())
        assert state.step == 1

    def test_first_step_is_lr_sign(self):
        g = np.array([0.3, -5.0, 1e-3])
        new, _ = adamw_step(self.params, {"w": g}, self.state, lr=0.01)
        delta = new["w"].numpy() - self.params["w"].numpy()
        np.testing.assert_allclose(delta, -0.01 * np.sign(g), rtol=1e-4)

    def test_decoupled_decay(self):
        new, _ = adamw_step(self.params, {"w": np.zeros(3)}, self.state, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(new["w"].numpy(), self.params["w"].numpy() * (1 - 0.05), rtol=1e-15)

    def test_lr_zero_is_bitwise_noop(self):
        g = np.array([1.0, 2.0, 3.0])
        new, _ = adamw_step(self.params, {"w": g}, self.state, lr=0.0, weight_decay=0.1)
        assert new["w"].numpy().tobytes() == self.params["w"].numpy().tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            adamw_step(self.params, {"w": np.zeros(2)}, self.state, lr=0.1)
        with pytest.raises(UsageError):
            adamw_step(self.params, {"v": np.zeros(3)}, self.state, lr=0.1)

    def test_matches_reference_over_steps(self):
        rng = np.random.default_rng(0)
        params, state = self.params, self.state
        p = self.params["w"].numpy().copy()
        m = v = np.zeros(3)
        for t in range(1, 6):
            g = rng.normal(size=3)
            params, state = adamw_step(params, {"w": g}, state, lr=0.01, weight_decay=0.1)
            p = p - 0.01 * 0.1 * p
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            p = p - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(params["w"].numpy(), p, rtol=1e-13)


class TestWarmup:
    def test_examples(self):
        assert warmup_lr(0, 100, 1.0) == pytest.approx(0.01)
        assert warmup_lr(99, 100, 1.0) == 1.0
        assert warmup_lr(1000, 100, 1.0) == 1.0

    @given(st.integers(0, 10_000), st.integers(1, 1000))
    def test_monotone_and_bounded(self, step, warm):
        assert 0 < warmup_lr(step, warm, 3e-4) <= 3e-4
        assert warmup_lr(step + 1, warm, 3e-4) >= warmup_lr(step, warm, 3e-4)


class TestSubsetSampling:
    def test_full_set(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert sample_subset_fixed_n(6, 6, rng).ids == tuple(range(6))

    def test_pairs_uniform(self):
        rng = stream_rng(0, 9, 0)
        counts = {c: 0 for c in itertools.combinations(range(6), 2)}
        for _ in range(15000):
            counts[sample_subset_fixed_n(6, 2, rng).ids] += 1
        freqs = np.array(list(counts.values())) / 15000
        assert np.all(np.abs(freqs - 1 / 15) <= 0.01)

    def test_random_n_sizes_uniform(self):
        rng = stream_rng(1, 9, 0)
        sizes = np.array([len(sample_subset_random_n(6, rng)) for _ in range(60000)])
        freqs = np.bincount(sizes, minlength=7)[1:] / 60000
        assert np.all(np.abs(freqs - 1 / 6) <= 0.01)

    def test_degenerate_and_deterministic(self):
        assert sample_subset_random_n(1, np.random.default_rng(0)).ids == (0,)
        a = [sample_subset_random_n(6, stream_rng(3, 1, i)).ids for i in range(50)]
        b = [sample_subset_random_n(6, stream_rng(3, 1, i)).ids for i in range(50)]
        assert a == b

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**32))
    def test_strictly_increasing(self, n_t, seed):
        ids = sample_subset_fixed_n(8, n_t, np.random.default_rng(seed)).ids
        assert len(ids) == n_t and list(ids) == sorted(set(ids))

    def test_range(self):
        with pytest.raises(ConfigurationError):
            sample_subset_fixed_n(6, 7, np.random.default_rng(0))


class TestStrategy:
    def test_parse(self):
        assert Strategy.parse("fixed-n:4") == Strategy("fixed-n", 4)
        assert str(Strategy.parse("random-n")) == "random-n"
        assert Strategy.parse("fixed-n:6").descriptor()["n_t"] == 6

    @pytest.mark.parametrize("text", ["fixed-n", "fixed-n:x", "sometimes", "fixed-n:0"])
    def test_bad(self, text):
        with pytest.raises(ConfigurationError):
            Strategy.parse(text)

    def test_out_of_range(self):
        with pytest.raises(ConfigurationError):
            Strategy.parse("fixed-n:9").validate(6)

    def test_warmup_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(warmup_steps=0)


class TestTrain:
    def test_two_sample_overfit(self):
        env = default_environment(seed=8)
        ds = generate_dataset(env, generate_trajectory(env, 2 / 6.6 + 1e-6, 6.6, 1.0, seed=9))
        provider = PseudoDistanceProvider(ds, "timestamp", cap=50.0)
        model = tiny_model()
        cfg = TrainConfig(Strategy.parse("fixed-n:6"), batch_size=4, steps=200, lr=1e-2, warmup_steps=10,
                          weight_decay=0.0)
        res = train(model, ds, provider, cfg)
        assert res.losses[-10:].mean() < 1e-3 * max(res.losses[0], 1e-3) + 1e-4
        assert res.losses[-10:].mean() < res.losses[:10].mean()

    def test_deterministic_curves(self, data):
        ds, provider = data
        cfg = TrainConfig(Strategy.parse("random-n"), batch_size=8, steps=6, warmup_steps=2)
        a = train(tiny_model(), ds, provider, cfg).losses
        b = train(tiny_model(), ds, provider, cfg).losses
        assert a.tobytes() == b.tobytes()

    def test_random_n_visits_every_size(self, data):
        ds, provider = data
        cfg = TrainConfig(Strategy.parse("random-n"), batch_size=2, steps=60, warmup_steps=2)
        sizes = {r.subset_size for r in train(tiny_model(), ds, provider, cfg).log}
        assert sizes == set(range(1, 7))

    def test_same_subset_for_both_pair_members(self, data, monkeypatch):
        ds, provider = data
        model = tiny_model()
        seen = []
        original = model.apply

        def spy(params, taps, ids):
            seen.append((taps.shape, tuple(ids)))
            return original(params, taps, ids)

        monkeypatch.setattr(model, "apply", spy)
        cfg = TrainConfig(Strategy.parse("fixed-n:3"), batch_size=5, steps=4, warmup_steps=2)
        steps = []
        train(model, ds, provider, cfg, on_step=lambda s, sub, n, k, loss: steps.append(sub.ids))
        # one forward per step carries both branches (2 * batch rows) under one id list
        assert [ids for _, ids in seen] == steps
        assert all(shape[:2] == (10, 3) for shape, _ in seen)

    def test_lr_zero_leaves_params(self, data):
        ds, provider = data
        model = tiny_model()
        before = {k: v.numpy().tobytes() for k, v in model.params.items()}
        train(model, ds, provider, TrainConfig(batch_size=4, steps=1, lr=0.0, warmup_steps=1))
        assert {k: v.numpy().tobytes() for k, v in model.params.items()} == before

    def test_divergence_guard(self, data):
        ds, provider = data
        cfg = TrainConfig(batch_size=4, steps=5, warmup_steps=1)
        poison = lambda n, k, d: np.where(np.arange(len(d)) == 0, np.nan, 1.0)
        with pytest.raises(DivergenceError, match="step 0"):
            train(tiny_model(), ds, provider, cfg, pair_weights=poison)

    def test_checkpoint_and_loss_csv(self, data, tmp_path):
        ds, provider = data
        model = tiny_model()
        cfg = TrainConfig(Strategy.parse("fixed-n:6"), batch_size=4, steps=3, warmup_steps=1)
        res = train(model, ds, provider, cfg, checkpoint_path=tmp_path / "m.ckpt")
        back, header = load_checkpoint(tmp_path / "m.ckpt")
        assert header["strategy"] == {"strategy": "fixed-n:6", "kind": "fixed-n", "n_t": 6}
        for k in model.params:
            assert back.params[k].numpy().tobytes() == model.params[k].numpy().tobytes()
        write_loss_csv(tmp_path / "loss.csv", res.log)
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,lr,loss" and len(lines) == 4

    def test_a_max_mismatch(self, data):
        ds, provider = data
        model = AdaPosModel(ModelConfig.small(a_max=4), seed=0)
        with pytest.raises(ConfigurationError):
            train(model, ds, provider, TrainConfig(steps=1))
