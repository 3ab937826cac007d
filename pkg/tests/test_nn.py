import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcal.nn import (
    Batch,
    MlpConfig,
    NonFiniteError,
    PriorSpec,
    forward,
    loss_and_grad,
    mlp_init,
    unpack,
)
from helpers import gradient_check, relative_error


class TestInit:
    def test_deterministic(self):
        cfg = MlpConfig(3, (5, 4), 3)
        assert mlp_init(cfg, 11).tobytes() == mlp_init(cfg, 11).tobytes()

    def test_parameter_count(self):
        cfg = MlpConfig(1, (2,), 1, "gaussian-mean-only")
        assert cfg.n_params == 7
        assert mlp_init(cfg, 0).shape == (7,)

    def test_seeds_differ(self):
        cfg = MlpConfig(2, (4,), 2)
        assert np.any(mlp_init(cfg, 0) != mlp_init(cfg, 1))

    def test_biases_zero_and_weights_bounded(self):
        cfg = MlpConfig(3, (6,), 4)
        (w1, b1), (w2, b2) = unpack(mlp_init(cfg, 2), cfg)
        assert not b1.any() and not b2.any()
        assert np.abs(w1).max() <= np.sqrt(6 / 9)

    @pytest.mark.parametrize("kwargs", [
        dict(input_dim=0),
        dict(input_dim=2, hidden_dims=(0,)),
        dict(input_dim=2, output_dim=1, head="categorical"),
        dict(input_dim=2, output_dim=2, head="gaussian-mean-only"),
        dict(input_dim=2, head="poisson"),
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            MlpConfig(**kwargs)


class TestForward:
    def test_zero_params_uniform(self):
        cfg = MlpConfig(2, (4,), 3)
        p = forward(np.zeros(cfg.n_params), cfg, np.ones((5, 2)))
        np.testing.assert_allclose(p, 1 / 3, atol=1e-15)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        cfg = MlpConfig(3, (7,), 5)
        p = forward(rng.standard_normal(cfg.n_params) * 3, cfg, rng.standard_normal((9, 3)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_logvar_head_unit_variance_with_zero_final_layer(self):
        cfg = MlpConfig(2, (4,), 1, "gaussian-mean-and-logvar")
        params = mlp_init(cfg, 0)
        w, b = unpack(params, cfg)[-1]
        w[:] = 0.0
        b[:] = 0.0
        _, var = forward(params, cfg, np.random.default_rng(0).standard_normal((6, 2)))
        np.testing.assert_array_equal(var, 1.0)

    def test_dimension_mismatch(self):
        cfg = MlpConfig(2, (4,), 3)
        with pytest.raises(ValueError):
            forward(mlp_init(cfg, 0), cfg, np.ones((3, 5)))
        with pytest.raises(ValueError):
            forward(np.zeros(4), cfg, np.ones((3, 2)))

    def test_non_finite_reports_layer(self):
        cfg = MlpConfig(1, (3,), 2)
        params = mlp_init(cfg, 0)
        params[0] = np.inf
        with pytest.raises(NonFiniteError) as info:
            forward(params, cfg, np.ones((2, 1)))
        assert info.value.layer == 0


class TestLossAndGrad:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_finite_difference(self, seed):
        grad, numeric = gradient_check(seed)
        assert relative_error(grad, numeric).max() < 1e-4

    def test_vanishing_prior_gives_pure_data_gradient(self):
        cfg = MlpConfig(2, (5,), 3)
        rng = np.random.default_rng(0)
        params = mlp_init(cfg, 0)
        batch = Batch(rng.standard_normal((8, 2)), rng.integers(0, 3, 8))
        _, g_flat = loss_and_grad(params, cfg, batch, PriorSpec(1e300), 7.0, 8)
        _, g_none = loss_and_grad(params, cfg, batch, PriorSpec(1e300), 0.01, 8)
        np.testing.assert_array_equal(g_flat, g_none)

    def test_duplicating_rows_keeps_mean_loss(self):
        cfg = MlpConfig(2, (5,), 1, "gaussian-mean-and-logvar")
        rng = np.random.default_rng(1)
        params = mlp_init(cfg, 1)
        x, y = rng.standard_normal((6, 2)), rng.standard_normal(6)
        prior = PriorSpec(2.0)
        a, _ = loss_and_grad(params, cfg, Batch(x, y), prior, 1.0, 100)
        b, _ = loss_and_grad(params, cfg, Batch(np.vstack([x, x]), np.concatenate([y, y])), prior, 1.0, 100)
        assert a == pytest.approx(b, rel=1e-12)

    def test_gaussian_mean_only_loss_value(self):
        cfg = MlpConfig(1, (), 1, "gaussian-mean-only")
        params = np.array([2.0, 0.5])
        x, y = np.array([[1.0], [-1.0]]), np.array([2.0, -2.0])
        loss, _ = loss_and_grad(params, cfg, Batch(x, y), PriorSpec(1e300), 1.0, 2, obs_var=0.5)
        resid = np.array([0.5, 0.5])
        expected = np.mean(0.5 * np.log(2 * np.pi * 0.5) + 0.5 * resid**2 / 0.5)
        assert loss == pytest.approx(expected, rel=1e-14)

    def test_rejects_bad_labels_and_temperature(self):
        cfg = MlpConfig(1, (2,), 2)
        batch = Batch(np.ones((2, 1)), np.array([0, 2]))
        with pytest.raises(ValueError):
            loss_and_grad(mlp_init(cfg, 0), cfg, batch, PriorSpec())
        with pytest.raises(ValueError):
            loss_and_grad(mlp_init(cfg, 0), cfg, Batch(np.ones((1, 1)), [0]), PriorSpec(), 0.0)
