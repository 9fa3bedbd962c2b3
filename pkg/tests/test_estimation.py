import json

import numpy as np
import pytest

from mogi.estimation import (LOADINGS, FitResult, MGIEstimator, MOGIEstimator, WeightMatrices, _Data,
                             _data_scales, _mgi_coefficients, _Objective, _operators, _Transform,
                             fit_mgi_baseline, fit_wlse, loss_wlse, mgi_scaling, regime_residuals,
                             sandwich_covariance, stage1_lse, weight_matrices)
from mogi.exceptions import DomainError
from mogi.kernels import kron, varrho_series, vech_length
from mogi.model import derive_coefficients, true_garch_params
from mogi.params import GarchParams
from mogi.realized import RealizedSeries


@pytest.fixture(scope="module")
def truth(bivariate):
    return true_garch_params(bivariate)


@pytest.fixture(scope="module")
def bivariate_fit(bivariate_series):
    return fit_wlse(bivariate_series, n_starts=3)


def _perturbed(theta, step):
    kw = theta.to_dict_arrays()
    kw["gamma_high"] = kw["gamma_high"] + step * np.tril(np.ones_like(kw["gamma_high"]))
    kw["beta_low"] = kw["beta_low"] - step * np.eye(theta.p)
    return GarchParams(**kw)


def test_adjoint_gradient_matches_finite_differences(bivariate_series, truth):
    d = _Data(bivariate_series)
    s_h, s_l, mu_scale, v_h, _ = _data_scales(d)
    tr = _Transform(d.p, s_h, s_l, mu_scale, _Transform.BLOCKS, truth)
    obj = _Objective(d, WeightMatrices.identity(d.p), tr, scale=1.0 / v_h)
    z = tr.encode(truth) + np.random.default_rng(3).normal(scale=0.02, size=tr.size)
    val, grad = obj.value_and_grad(z)
    assert val == pytest.approx(obj(z), rel=1e-12)
    fd = np.empty_like(z)
    for j in range(z.size):
        h = 1e-6 * max(1.0, abs(z[j]))
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        fd[j] = (obj(zp) - obj(zm)) / (2 * h)
    np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-6 * np.abs(fd).max())


def test_transform_round_trip(bivariate_series, truth):
    d = _Data(bivariate_series)
    s_h, s_l, mu_scale, _, _ = _data_scales(d)
    tr = _Transform(d.p, s_h, s_l, mu_scale, _Transform.BLOCKS, truth)
    back = tr.decode(tr.encode(truth))
    np.testing.assert_allclose(back.to_vector(), truth.to_vector(), atol=1e-12)
    assert tr.size == GarchParams.n_params(d.p)


def test_vech_operators_agree_with_coefficients(bivariate_series, truth):
    d = _Data(bivariate_series)
    ops = _operators(truth.gamma_high, truth.gamma_low, truth.beta_high, truth.beta_low, d.pos, d.dup)
    coefs = derive_coefficients(truth, d.tau)
    expected = [coefs.high.R, coefs.high.A, coefs.high.B, coefs.low.R, coefs.low.A, coefs.low.B]
    for got, M in zip(ops, expected):
        np.testing.assert_allclose(got, d.reduce(M), atol=1e-12)


def test_loss_is_smaller_at_truth_than_far_away(bivariate_series, truth):
    at_truth = loss_wlse(truth, bivariate_series)
    assert at_truth < loss_wlse(_perturbed(truth, 0.15), bivariate_series)


def test_loss_scales_inversely_with_weights(bivariate_series, truth):
    W = WeightMatrices.identity(truth.p)
    base = loss_wlse(truth, bivariate_series, W)
    assert loss_wlse(truth, bivariate_series, W.scaled(4.0)) == pytest.approx(base / 4.0, rel=1e-12)


def test_loss_matches_residual_quadratic_form(bivariate_series, truth):
    e_h, e_l = regime_residuals(truth, bivariate_series)
    expected = (np.sum(e_h ** 2) + np.sum(e_l ** 2)) / (2 * e_h.shape[0])
    assert loss_wlse(truth, bivariate_series) == pytest.approx(expected, rel=1e-10)


def test_weight_matrices_must_be_positive_definite():
    q = vech_length(2)
    with pytest.raises(DomainError):
        WeightMatrices(-np.eye(q), np.eye(q), 0.0, 0.0)
    W = WeightMatrices.identity(2)
    np.testing.assert_allclose(W.inv_high, np.eye(q))


def test_loss_invariant_to_asset_permutation(bivariate_series):
    p = 2
    theta = GarchParams(np.array([[0.02, 0.004], [0.004, 0.03]]), np.array([[0.01, 0.002], [0.002, 0.02]]),
                        np.diag([0.4, 0.5]), np.diag([0.7, 0.6]), np.diag([0.8, 0.7]), np.diag([0.2, 0.3]))
    perm = [1, 0]
    P = np.eye(p)[perm]
    s = bivariate_series
    swapped = RealizedSeries(s.rv[:, perm][:, :, perm], s.overnight[:, perm], s.tau)
    theta_p = GarchParams(*(P @ M @ P.T for M in (theta.omega_high, theta.omega_low, theta.gamma_high,
                                                   theta.gamma_low, theta.beta_high, theta.beta_low)))
    assert loss_wlse(theta_p, swapped) == pytest.approx(loss_wlse(theta, s), rel=1e-10)


def test_too_short_series_is_rejected(bivariate_series):
    s = bivariate_series
    short = RealizedSeries(s.rv[:5], s.overnight[:5], s.tau)
    with pytest.raises(DomainError):
        _Data(short)


def test_stage1_regime_must_be_known(bivariate_series):
    with pytest.raises(DomainError):
        stage1_lse(bivariate_series, "middle")


def test_weight_matrices_carry_ridge(bivariate_series, truth):
    W = weight_matrices(bivariate_series, truth, truth)
    assert W.ridge_high > 0 and W.ridge_low > 0
    assert np.linalg.eigvalsh(W.high)[0] >= W.ridge_high * (1 - 1e-9)


def test_fit_reaches_loss_at_or_below_truth(bivariate_fit, bivariate_series, truth):
    fit = bivariate_fit
    at_truth = loss_wlse(truth, bivariate_series, fit.weights)
    assert fit.loss <= at_truth + 1e-10
    assert loss_wlse(fit.theta, bivariate_series, fit.weights) == pytest.approx(fit.loss, rel=1e-6, abs=1e-12)
    assert set(fit.stages) == {"high", "low"}
    for name in LOADINGS:
        assert getattr(fit.theta, name)[0, 0] >= 0


def test_sandwich_covariance_is_psd(bivariate_fit, bivariate_series):
    fit = bivariate_fit
    cov = sandwich_covariance(fit.theta, bivariate_series, fit.weights)
    k = GarchParams.n_params(2)
    assert cov.shape == (k, k)
    assert np.linalg.eigvalsh(cov)[0] > -1e-12 * np.abs(cov).max()
    fit.covariance = cov
    se = fit.standard_errors()
    assert np.all(np.isfinite(se)) and np.all(se > 0)


def test_fit_result_serializes(bivariate_fit):
    d = json.loads(bivariate_fit.to_json())
    assert d["converged"] in (True, False)
    assert GarchParams.from_dict(d["theta"]).p == 2
    assert FitResult(bivariate_fit.theta, 1.0, True, 0).standard_errors() is None


def test_mgi_coefficients_follow_definition():
    gamma = np.array([[0.5, 0.0], [0.1, 0.6]])
    beta = np.array([[0.7, 0.0], [-0.1, 0.5]])
    R, A = _mgi_coefficients(gamma, beta)
    Rk, Bk = kron(gamma, gamma), kron(beta, beta)
    r1, r2, r3 = varrho_series(Bk)
    rho = 2 * r3 @ Rk + r1 - r2
    np.testing.assert_allclose(R, rho @ Rk @ np.linalg.inv(rho), atol=1e-12)
    np.testing.assert_allclose(A, rho @ Bk, atol=1e-12)


def test_mgi_scaling_inflates_open_variance(bivariate_series):
    L = mgi_scaling(bivariate_series)
    assert np.all(np.diag(L) >= 1.0)
    np.testing.assert_allclose(L, np.diag(np.diag(L)))


def test_mgi_baseline_fit_and_forecast(bivariate_series):
    fit = fit_mgi_baseline(bivariate_series)
    H = fit.forecast(bivariate_series)
    assert H.shape == (2, 2)
    assert np.linalg.eigvalsh(H)[0] >= -1e-12
    raw = fit.forecast(bivariate_series, scaled=False, psd=False)
    np.testing.assert_allclose(fit.scaling @ raw @ fit.scaling, fit.forecast(bivariate_series, psd=False))


def test_estimator_wrappers(bivariate_series):
    est = MOGIEstimator(n_starts=2).fit(bivariate_series)
    H = est.predict(bivariate_series)
    assert H.shape == (2, 2) and np.linalg.eigvalsh(H)[0] >= -1e-12
    assert est.get_params()["n_starts"] == 2
    mgi = MGIEstimator().fit(bivariate_series)
    assert mgi.predict(bivariate_series).shape == (2, 2)
