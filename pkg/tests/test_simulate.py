import json

import numpy as np
import pytest

from mogi.exceptions import DomainError, SimulationFault
from mogi.simulate import (
    FactorDesign,
    banded_idiosyncratic,
    build_U,
    export_panels,
    load_panels,
    simulate_factor_mogi,
    simulate_mogi,
    structural_from_dict,
    structural_to_dict,
)


@pytest.fixture(scope="module")
def flat(trivariate):
    """No price feedback (beta = nu = 0) and gamma = I: the spot path is deterministic."""
    Z = np.zeros((3, 3))
    I = np.eye(3)
    return trivariate.replace(gamma_h=I, gamma_l=I, beta_h=Z, beta_l=Z, nu=Z,
                              omega_h2=trivariate.omega_h1, omega_l2=trivariate.omega_l1,
                              sigma0=np.diag([0.02, 0.03, 0.04]))


def test_flat_case_matches_closed_form_integrals(flat):
    """Sigma_t = S0 - s(1 - s)(omega + S0), so the integral is tau (S0 - (omega + S0) / 6)."""
    a = simulate_mogi(flat, 2, 39, seed=1)
    b = simulate_mogi(flat, 2, 39, seed=2)
    np.testing.assert_allclose(a.panels[1].iv, b.panels[1].iv, rtol=1e-12)
    day = a.panels[0]
    S0, tau = flat.sigma0, flat.tau
    np.testing.assert_allclose(day.iv, tau * (S0 - (flat.omega_h1 + S0) / 6), rtol=2e-3)
    np.testing.assert_allclose(day.sigma_close, S0, atol=1e-12)
    night = (1 - tau) * (S0 - (flat.omega_l1 + S0) / 6)
    np.testing.assert_allclose(day.overnight_iv, night, rtol=2e-3)


def test_flat_case_converges_under_grid_refinement(flat):
    coarse = simulate_mogi(flat, 1, 39, seed=1).panels[0].iv
    fine = simulate_mogi(flat, 1, 39, seed=1, fine=20).panels[0].iv
    assert np.abs(fine - coarse).max() / np.abs(fine).max() < 0.01


def test_negative_spot_volatility_raises_with_day(trivariate):
    Z = np.zeros((3, 3))
    bad = trivariate.replace(gamma_h=Z, gamma_l=Z, beta_h=Z, beta_l=Z, nu=Z)
    with pytest.raises(SimulationFault) as info:
        simulate_mogi(bad, 2, 13, seed=0)
    assert info.value.day == 1


def test_same_seed_same_paths(trivariate):
    a = simulate_mogi(trivariate, 3, 26, seed=[4, 2])
    b = simulate_mogi(trivariate, 3, 26, seed=[4, 2])
    c = simulate_mogi(trivariate, 3, 26, seed=[4, 3])
    for x, y in zip(a.panels, b.panels):
        np.testing.assert_array_equal(x.prices, y.prices)
    assert not np.allclose(a.panels[0].prices, c.panels[0].prices)


def test_seed_is_required(trivariate):
    with pytest.raises(DomainError):
        simulate_mogi(trivariate, 1, 13, seed=None)


def test_noise_only_touches_interior_rows(trivariate):
    clean = simulate_mogi(trivariate, 2, 78, seed=3, noise_std=0.0).panels[1]
    noisy = simulate_mogi(trivariate, 2, 78, seed=3).panels[1]
    np.testing.assert_array_equal(noisy.prices[[0, -1]], clean.prices[[0, -1]])
    eps = (noisy.prices - clean.prices)[1:-1]
    assert 0.0008 < eps.std() < 0.0012
    np.testing.assert_array_equal(noisy.prices[0], noisy.open_price)
    np.testing.assert_array_equal(noisy.prices[-1], noisy.close_price)
    increments = np.diff(clean.prices[1:], axis=0)[:, 0]
    assert abs(np.corrcoef(eps[:, 0], increments)[0, 1]) < 0.35


def test_days_chain_together(short_sim):
    for prev, cur in zip(short_sim.panels, short_sim.panels[1:]):
        np.testing.assert_array_equal(cur.open_price, prev.next_open)
        np.testing.assert_array_equal(cur.sigma_open, prev.sigma_end)
    assert short_sim.n == 60
    np.testing.assert_array_equal(short_sim.sigma_end, short_sim.panels[-1].sigma_end)


def test_zero_drift_overnight_returns_center(short_sim):
    r = np.stack([d.overnight_return for d in short_sim.panels])
    se = r.std(axis=0, ddof=1) / np.sqrt(r.shape[0])
    assert np.all(np.abs(r.mean(axis=0)) < 3 * se + 1e-12)


def test_oracle_integrals_are_psd(short_sim):
    for d in short_sim.panels:
        assert np.linalg.eigvalsh(d.iv)[0] > 0
        assert np.linalg.eigvalsh(d.overnight_iv)[0] > 0


def test_build_U_orthogonality():
    np.testing.assert_allclose(build_U(4).T @ build_U(4), 4 * np.eye(3), atol=1e-12)
    U = build_U(200)
    np.testing.assert_allclose(U.T @ U, 200 * np.eye(3), atol=1e-8)
    assert U[:, 1] @ U[:, 1] == 200
    with pytest.raises(DomainError):
        build_U(10, r=2)


def test_banded_idiosyncratic_bound():
    G = banded_idiosyncratic(50)
    assert np.linalg.norm(G, 2) <= 3 * 0.004 / 0.5
    np.testing.assert_allclose(np.diag(G), 0.004)
    assert G[0, 1] == pytest.approx(0.002)


def test_factor_design_validation():
    d = FactorDesign.default(12)
    with pytest.raises(DomainError):
        FactorDesign(d.loadings * 2, d.idiosyncratic, d.factor_params)
    with pytest.raises(DomainError):
        FactorDesign(d.loadings, -d.idiosyncratic, d.factor_params)


def test_factor_simulation_eigen_gap():
    design = FactorDesign.default(40)
    sim = simulate_factor_mogi(design, 6, 39, seed=9)
    U = design.loadings
    ratios = []
    for f in sim.factor_panels:
        G = U @ f.day_iv @ U.T + design.idiosyncratic
        lam = np.linalg.eigvalsh(G)[::-1]
        ratios.append(lam[2] / lam[3])
    assert np.mean(ratios) >= 10
    assert sim.panels[0].p == 40 and sim.factor_panels[0].p == 3


def test_export_round_trip_without_oracle(tmp_path, trivariate):
    sim = simulate_mogi(trivariate, 3, 13, seed=2)
    out = export_panels(sim, tmp_path / "run", trivariate)
    panels, manifest = load_panels(out)
    assert manifest["n"] == 3 and manifest["p"] == 3
    for a, b in zip(sim.panels, panels):
        np.testing.assert_allclose(b.prices, a.prices, rtol=1e-11)
        np.testing.assert_allclose(b.overnight_return, a.overnight_return, atol=1e-10)
        assert b.iv is None and b.sigma_end is None
    oracle = json.loads((out / "oracle.sidecar.json").read_text())
    np.testing.assert_allclose(oracle["iv"], sim.oracle_stack("iv"))
    params = structural_from_dict(manifest["params"])
    np.testing.assert_allclose(params.beta_h, trivariate.beta_h)
    assert structural_to_dict(params) == structural_to_dict(trivariate)
