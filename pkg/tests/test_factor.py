import numpy as np
import pytest

from mogi.exceptions import DomainError, NumericError
from mogi.factor import (FactorEstimate, FactorMOGI, default_r_max, estimate_loadings, hard_threshold,
                         poet_estimate, poet_idiosyncratic, poet_input, predict_large, project_factor,
                         rank_criterion, relative_frobenius, remove_top_components, select_rank,
                         single_day_threshold, soft_threshold, sparsity_measure, subspace_cosines,
                         threshold_residual)
from mogi.model import forecast_next, true_garch_params
from mogi.realized import realize
from mogi.simulate import FactorDesign, build_U, simulate_factor_mogi


def _factor_stack(rng, p=30, n=60, r=3, idio=0.01):
    """Daily matrices U F_k U' / p + idio I with random positive factor variances."""
    U = build_U(p)[:, :r]
    F = rng.uniform(0.5, 2.0, size=(n, r))
    rv = np.einsum("ia,ka,ja->kij", U, F, U) + idio * np.eye(p)
    return U, rv


def test_loadings_span_true_factors(rng):
    U, rv = _factor_stack(rng)
    est = estimate_loadings(rv, 3)
    p = U.shape[0]
    np.testing.assert_allclose(est.T @ est, p * np.eye(3), atol=1e-9)
    assert subspace_cosines(est, U).min() > 0.999


def test_loadings_need_variation():
    rv = np.repeat(np.eye(4)[None], 5, axis=0)
    with pytest.raises(NumericError):
        estimate_loadings(rv, 1)
    with pytest.raises(DomainError):
        estimate_loadings(rv, 0)


def test_rank_selection_finds_single_factor(rng):
    _, rv = _factor_stack(rng, r=1)
    assert select_rank(rv, 8, m=390) == 1


def test_rank_selection_finds_three_factors(rng):
    _, rv = _factor_stack(rng, r=3, idio=0.05)
    assert select_rank(rv, 8, m=390) == 3


def test_heavy_penalty_gives_one_factor(rng):
    _, rv = _factor_stack(rng, r=3)
    assert select_rank(rv, 8, m=390, c1_scale=1e6) == 1


def test_rank_criterion_bounds(rng):
    _, rv = _factor_stack(rng, p=10)
    with pytest.raises(DomainError):
        rank_criterion(rv, 1, 390)
    with pytest.raises(DomainError):
        rank_criterion(rv, 11, 390)
    with pytest.raises(DomainError):
        rank_criterion(rv, 4, 390, c1_mode="weekly")
    assert rank_criterion(rv, 4, 390, c1_mode="global").shape == (4,)


@pytest.mark.parametrize("p, expected", [(5, 2), (50, 8), (100, 15), (200, 30), (1000, 30)])
def test_default_r_max(p, expected):
    assert default_r_max(p) == expected


def test_project_factor_recovers_factor_matrices(rng):
    U, rv = _factor_stack(rng, idio=0.0)
    fe = project_factor(rv, np.zeros((rv.shape[0], U.shape[0])), U, 0.27)
    p = U.shape[0]
    expected = np.einsum("ia,kij,jb->kab", U, rv, U) / p ** 2
    np.testing.assert_allclose(fe.rv, expected, atol=1e-12)
    assert fe.series().p == 3
    with pytest.raises(DomainError):
        FactorEstimate(U * 2, fe.rv, fe.overnight, 0.27, 3)


def test_thresholding_rules():
    x = np.array([-0.3, -0.1, 0.0, 0.05, 0.4])
    np.testing.assert_allclose(soft_threshold(x, 0.1), [-0.2, 0.0, 0.0, 0.0, 0.3])
    np.testing.assert_allclose(hard_threshold(x, 0.1), [-0.3, -0.1, 0.0, 0.0, 0.4])


def test_threshold_residual_keeps_diagonal_and_symmetry():
    G = np.array([[1.0, 0.3, 0.05], [0.3, 4.0, -0.5], [0.05, -0.5, 1.0]])
    out = threshold_residual(G, 0.1, "soft")
    np.testing.assert_allclose(np.diag(out.matrix), np.diag(G))
    np.testing.assert_allclose(out.matrix, out.matrix.T)
    assert out.matrix[0, 2] == 0.0
    assert out.matrix[0, 1] == pytest.approx(0.3 - 0.1 * 2.0)
    hard = threshold_residual(G, 0.1, "hard")
    assert hard.matrix[0, 1] == 0.3 and hard.matrix[0, 2] == 0.0


def test_sector_rule_keeps_within_sector_pairs():
    G = np.full((4, 4), 0.2) + np.eye(4)
    out = threshold_residual(G, 0.0, "sector", sectors=["a", "a", "b", "b"])
    assert out.matrix[0, 1] == 0.2 and out.matrix[2, 3] == 0.2
    assert out.matrix[0, 2] == 0.0
    with pytest.raises(DomainError):
        threshold_residual(G, 0.0, "sector")
    with pytest.raises(DomainError):
        threshold_residual(G, 0.1, "median")
    with pytest.raises(DomainError):
        threshold_residual(G, -0.1, "soft")


def test_poet_estimate_limits(rng):
    A = rng.normal(size=(8, 8))
    G = A @ A.T
    np.testing.assert_allclose(poet_estimate(G, 2, 0.0), G, atol=1e-10)
    residual = remove_top_components(G, 2)
    expected = G - residual + np.diag(np.diag(residual))
    np.testing.assert_allclose(poet_estimate(G, 2, 1e6), expected, atol=1e-10)


def test_poet_input_and_idiosyncratic(rng):
    U, rv = _factor_stack(rng, idio=0.02)
    overnight = rng.normal(scale=0.01, size=(rv.shape[0], U.shape[0]))
    G = poet_input(rv, overnight)
    np.testing.assert_allclose(G, G.T)
    sparse = poet_idiosyncratic(rv, overnight, 3, 0.5)
    assert np.all(np.diag(sparse.matrix) >= 0)


def test_single_day_threshold_value():
    assert single_day_threshold(50, 390) == pytest.approx(np.sqrt(2 * np.log(50) / np.sqrt(390)))


def test_sparsity_measure():
    G = np.diag([1.0, 4.0, 2.0])
    assert sparsity_measure(G) == pytest.approx(4.0)
    G[0, 1] = G[1, 0] = 0.5
    assert sparsity_measure(G) == pytest.approx(4.0 + 2.0)
    with pytest.raises(DomainError):
        sparsity_measure(G, 1.0)


def test_relative_frobenius():
    T = np.diag([1.0, 4.0])
    assert relative_frobenius(T, T) == pytest.approx(1.0)
    assert relative_frobenius(np.zeros((2, 2)), T) == 0.0
    with pytest.raises(DomainError):
        relative_frobenius(T, -T)


def test_subspace_cosines_ignore_rotation(rng):
    U = build_U(20)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    np.testing.assert_allclose(subspace_cosines(U @ Q, U), 1.0, atol=1e-12)


@pytest.fixture(scope="module")
def factor_sim():
    design = FactorDesign.default(20)
    sim = simulate_factor_mogi(design, 40, 78, seed=3)
    return design, sim, realize(sim.panels, design.factor_params.tau)


def test_predict_large_composes_factor_and_sparse_parts(factor_sim, rng):
    design, sim, series = factor_sim
    theta = true_garch_params(design.factor_params)
    fe = project_factor(series.rv, series.overnight, design.loadings, series.tau)
    S = design.idiosyncratic
    out = predict_large(design.loadings, theta, fe.series(), S)
    H = forecast_next(theta, fe.series(), psd=False)
    np.testing.assert_allclose(out.raw, design.loadings @ H @ design.loadings.T + S, atol=1e-12)
    assert np.linalg.eigvalsh(out.psd)[0] >= -1e-12


def test_factor_mogi_end_to_end(factor_sim):
    design, sim, series = factor_sim
    model = FactorMOGI(n_factors=3, n_starts=1).fit(series)
    assert model.rank_ == 3
    assert model.factor_.r == 3
    assert subspace_cosines(model.loadings_, design.loadings).mean() > 0.95
    H = model.predict(series)
    assert H.shape == (20, 20)
    assert np.linalg.eigvalsh(H)[0] >= -1e-10
    with pytest.raises(DomainError):
        FactorMOGI().fit(type(series)(series.rv, series.overnight, series.tau))
