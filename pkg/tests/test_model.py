import math

import numpy as np
import pytest

from softsense import autodiff as ad
from softsense import nn
from softsense.data import MultiUnitDataset, UnitData
from softsense.model import (ContextPosterior, GaussianDiag, ModelDims,
                             SsmtlModel, log_prob_diag_normal, reparam_sample)
from softsense.objective import ObjectiveConfig, loss_for_training, sgvb_dataset_estimate

from oracles import finite_diff, relative_error

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def diag(mean, log_std):
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    log_std = np.atleast_2d(np.asarray(log_std, dtype=np.float64))
    return GaussianDiag(ad.tensor(mean), ad.tensor(log_std))


def small_model(seed=0, hidden=(8,)):
    dims = ModelDims(context=2, latent=3, x=2, y=1)
    return SsmtlModel.build(dims, hidden=hidden, seed=seed)


class TestLogProb:
    def test_standard_normal_at_zero(self):
        assert log_prob_diag_normal([0.0], diag([0.0], [0.0])) == pytest.approx(
            -0.9189385, abs=1e-6)

    def test_at_mean(self):
        for sigma in (0.5, 1.0, 2.7):
            val = log_prob_diag_normal([1.3], diag([1.3], [math.log(sigma)]))
            assert val == pytest.approx(-HALF_LOG_2PI - math.log(sigma))

    def test_three_dims_factorize(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=3)
        m = rng.normal(size=3)
        ls = rng.normal(size=3) * 0.3
        total = log_prob_diag_normal(v, diag(m, ls))
        parts = sum(log_prob_diag_normal([v[i]], diag([m[i]], [ls[i]]))
                    for i in range(3))
        assert total == pytest.approx(parts)

    def test_non_positive_std_rejected(self):
        d = diag([0.0], [0.0])
        d.std.data[:] = 0.0
        with pytest.raises(ValueError):
            log_prob_diag_normal([0.0], d)

    def test_density_integrates_to_one_on_slices(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            mu = float(rng.normal())
            sigma = float(np.exp(rng.normal() * 0.5))
            d = diag([mu], [math.log(sigma)])
            grid = np.linspace(mu - 8 * sigma, mu + 8 * sigma, 4001)
            dens = np.array([math.exp(log_prob_diag_normal([g], d)) for g in grid])
            mass = np.trapezoid(dens, grid)
            assert 0.999 <= mass <= 1.001


class TestReparamSample:
    def test_standard_case(self):
        assert reparam_sample(diag([0.0], [0.0]), [0.5]) == pytest.approx([0.5])

    def test_zero_noise_gives_mean(self):
        assert reparam_sample(diag([2.5], [1.0]), [0.0]) == pytest.approx([2.5])

    def test_monte_carlo_moments(self):
        m, s = 1.5, 0.7
        rng = np.random.default_rng(3)
        n = 10 ** 5
        draws = np.array([reparam_sample(diag([m], [math.log(s)]),
                                         eps)[0]
                          for eps in rng.standard_normal((n, 1))])
        se_mean = s / math.sqrt(n)
        assert abs(draws.mean() - m) < 3 * se_mean
        se_std = s / math.sqrt(2 * (n - 1))
        assert abs(draws.std(ddof=1) - s) < 3 * se_std

    def test_gradient_flows_through_mean_and_std_not_noise(self):
        m = ad.tensor([[0.5]], requires_grad=True)
        ls = ad.tensor([[0.2]], requires_grad=True)
        noise = np.array([[1.3]])  # exogenous constant, not a parameter
        with ad.fresh_tape():
            d = GaussianDiag(m, ls)
            sample = d.sample(noise)
            ad.backward(ad.sum_(sample))
        assert np.allclose(m.grad, [[1.0]])
        assert np.allclose(ls.grad, [[1.3 * math.exp(0.2)]])
        # only the variational parameters are upstream of the sample
        leaves = {id(m), id(ls)}
        stack, seen = [sample], set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._vjp is None and t.requires_grad:
                assert id(t) in leaves
            stack.extend(t._parents)


class TestContexts:
    def test_sample_context_near_mean_at_tiny_std(self):
        model = small_model()
        model.contexts["u"] = ContextPosterior(np.ones(2), np.full(2, -7.0))
        c, _ = model.sample_context("u", np.random.default_rng(0))
        assert np.allclose(c.data, 1.0, atol=1e-2)

    def test_seeded_draw_reproducible(self):
        model = small_model()
        model.add_unit("u")
        a, _ = model.sample_context("u", np.random.default_rng(5))
        b, _ = model.sample_context("u", np.random.default_rng(5))
        assert np.array_equal(a.data, b.data)

    def test_draw_mean_within_three_sigma(self):
        model = small_model()
        m = np.array([0.4, -1.2])
        model.contexts["u"] = ContextPosterior(m, np.log([0.5, 0.8]))
        rng = np.random.default_rng(17)
        n = 10 ** 4
        draws = np.stack([model.sample_context("u", rng)[0].data.ravel()
                          for _ in range(n)])
        se = np.array([0.5, 0.8]) / math.sqrt(n)
        assert (np.abs(draws.mean(axis=0) - m) < 3 * se).all()

    def test_bad_unit_raises(self):
        model = small_model()
        with pytest.raises(KeyError):
            model.sample_context("nope", np.random.default_rng(0))

    def test_fresh_initialization(self):
        post = ContextPosterior.fresh(3)
        assert np.array_equal(post.m.data, np.zeros(3))
        assert np.allclose(post.log_s.data, math.log(0.5))


class TestEncodersAndDecoder:
    def test_zero_weight_encoders_standard_normal(self):
        model = small_model()
        for p in model.network_params():
            p.data[:] = 0.0
        x = ad.tensor(np.random.default_rng(0).normal(size=(3, 2)))
        c = ad.tensor(np.zeros((3, 2)))
        qy = model.encode_y(x, c)
        assert np.array_equal(qy.mean.data, np.zeros((3, 1)))
        assert np.array_equal(qy.std.data, np.ones((3, 1)))
        qz = model.encode_z(x, ad.tensor(np.zeros((3, 1))), c)
        assert np.array_equal(qz.mean.data, np.zeros((3, 3)))
        assert np.array_equal(qz.std.data, np.ones((3, 3)))
        joint = model.decode(ad.tensor(np.zeros((3, 3))), c)
        assert np.array_equal(joint.mean.data, np.zeros((3, 3)))
        assert np.array_equal(joint.std.data, np.ones((3, 3)))

    def test_encoder_determinism(self):
        model = small_model(seed=4)
        x = ad.tensor([[0.3, -0.8]])
        c = ad.tensor([[0.1, 0.2]])
        a = model.encode_y(x, c)
        b = model.encode_y(x, c)
        assert np.array_equal(a.mean.data, b.mean.data)
        assert np.array_equal(a.log_std.data, b.log_std.data)

    def test_encode_y_jacobian_matches_finite_differences(self):
        model = small_model(seed=8)
        x = ad.tensor([[0.4, -0.2]], requires_grad=True)
        c = ad.tensor([[0.3, 0.1]])

        def mean_value():
            with ad.no_grad():
                return model.encode_y(x, c).mean.item()

        with ad.fresh_tape():
            ad.backward(ad.sum_(model.encode_y(x, c).mean))
        for i in range(2):
            fd = finite_diff(mean_value, x, i)
            assert relative_error(x.grad.flat[i], fd) < 1e-6

    def test_encode_z_jacobian_matches_finite_differences(self):
        model = small_model(seed=9)
        x = ad.tensor([[0.4, -0.2]], requires_grad=True)
        y = ad.tensor([[0.7]])
        c = ad.tensor([[0.3, 0.1]])

        def mean_sum():
            with ad.no_grad():
                return ad.sum_(model.encode_z(x, y, c).mean).item()

        with ad.fresh_tape():
            ad.backward(ad.sum_(model.encode_z(x, y, c).mean))
        for i in range(2):
            fd = finite_diff(mean_sum, x, i)
            assert relative_error(x.grad.flat[i], fd) < 1e-6

    def test_decode_splits_additively(self):
        model = small_model(seed=10)
        z = ad.tensor(np.random.default_rng(2).normal(size=(4, 3)))
        c = ad.tensor(np.random.default_rng(3).normal(size=(4, 2)))
        joint = model.decode(z, c)
        value = np.random.default_rng(4).normal(size=(4, 3))
        full = joint.log_prob(value).data
        px, py = model.split_xy(joint)
        parts = px.log_prob(value[:, :2]).data + py.log_prob(value[:, 2:]).data
        assert np.allclose(full, parts, rtol=0, atol=1e-12)

    def test_decoder_loglik_gradient_matches_finite_differences(self):
        model = small_model(seed=11)
        z = ad.tensor([[0.2, -0.4, 0.6]])
        c = ad.tensor([[0.5, -0.1]])
        value = np.array([[0.3, 0.1, -0.2]])
        w = model.decoder.net.weights[0]

        def loglik():
            with ad.no_grad():
                return model.decode(z, c).log_prob(value).item()

        with ad.fresh_tape():
            ad.backward(ad.sum_(model.decode(z, c).log_prob(value)))
        rng = np.random.default_rng(12)
        for i in rng.choice(w.size, size=8, replace=False):
            fd = finite_diff(loglik, w, int(i))
            assert abs(w.grad.flat[i] - fd) <= 1e-8 + 1e-5 * max(
                abs(w.grad.flat[i]), abs(fd))


class TestPredict:
    def test_deterministic(self):
        model = small_model(seed=13)
        model.add_unit("u")
        x = np.array([[0.2, 0.4]])
        a, _ = model.predict_y(x, "u")
        b, _ = model.predict_y(x, "u")
        assert np.array_equal(a, b)

    def test_equal_contexts_equal_predictions(self):
        model = small_model(seed=14)
        model.contexts["a"] = ContextPosterior(np.array([0.5, -0.5]), np.zeros(2))
        model.contexts["b"] = ContextPosterior(np.array([0.5, -0.5]), np.zeros(2))
        x = np.array([[0.1, 0.9]])
        assert np.array_equal(model.predict_y(x, "a")[0],
                              model.predict_y(x, "b")[0])

    def test_unknown_unit_raises(self):
        model = small_model()
        with pytest.raises(KeyError, match="finetune"):
            model.predict_y(np.zeros((1, 2)), "ghost")

    def test_sampling_prediction_agrees_with_tight_posterior(self):
        model = small_model(seed=15)
        model.contexts["u"] = ContextPosterior(np.array([0.3, 0.3]),
                                               np.full(2, -7.0))
        x = np.array([[0.5, -0.5]])
        mean_plugin, _ = model.predict_y(x, "u")
        mean_mc, _ = model.predict_y(x, "u", rng=np.random.default_rng(0),
                                     n_samples=32)
        assert np.allclose(mean_plugin, mean_mc, atol=1e-2)


def test_training_fits_noiseless_linear_system():
    """End-to-end check: a tiny linear system is learned to < 2% MAPE."""
    rng = np.random.default_rng(21)
    x = np.stack([np.linspace(-1, 1, 60), rng.uniform(-1, 1, 60)], axis=1)
    y = (2.0 + 0.5 * x[:, :1] - 0.3 * x[:, 1:])  # bounded away from zero
    unit = UnitData("w", x_labeled=x, y_labeled=y,
                    x_unlabeled=np.zeros((0, 2)),
                    x_test=x.copy(), y_test=y.copy())
    ds = MultiUnitDataset(units=[unit])

    dims = ModelDims(context=2, latent=3, x=2, y=1)
    model = SsmtlModel.build(dims, hidden=(24,), seed=5)
    model.add_unit("w")
    config = ObjectiveConfig(alpha=1.0, mc_samples=1)
    params = model.params()
    adam = nn.AdamState(params, lr=5e-3)
    step_rng = np.random.default_rng(33)
    for _ in range(800):
        with ad.fresh_tape():
            est = sgvb_dataset_estimate(model, ds, config, step_rng)
            ad.zero_grads(params)
            ad.backward(loss_for_training(est))
            nn.adam_step(adam, params, nn.collect_grads(params))
    pred, _ = model.predict_y(x, "w")
    mape = 100.0 * np.mean(np.abs(pred - y) / np.abs(y))
    assert mape < 2.0


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = small_model(seed=16)
        model.add_unit("alpha")
        model.add_unit("beta")
        model.contexts["alpha"].m.data[:] = [0.25, -0.75]
        path = tmp_path / "model.npz"
        nn.save_arrays(path, model.to_arrays())
        restored = SsmtlModel.from_arrays(nn.load_arrays(path))
        assert restored.dims == model.dims
        for a, b in zip(model.network_params(), restored.network_params()):
            assert np.array_equal(a.data, b.data)
        assert set(restored.contexts) == {"alpha", "beta"}
        for uid in model.contexts:
            assert np.array_equal(model.contexts[uid].m.data,
                                  restored.contexts[uid].m.data)
            assert np.array_equal(model.contexts[uid].log_s.data,
                                  restored.contexts[uid].log_s.data)


class TestModelDims:
    def test_validation(self):
        with pytest.raises(ValueError):
            ModelDims(context=0, latent=1, x=1, y=1)

    def test_overcomplete_latent_allowed(self):
        dims = ModelDims(context=4, latent=5, x=2, y=1)
        assert dims.latent > dims.x + dims.y
        assert dims.decoder_in == 9
        assert dims.y_encoder_in == 6
        assert dims.z_encoder_in == 7
