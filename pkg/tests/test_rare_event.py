import math

import numpy as np
import pytest
from scipy import integrate

from mantrack.rare_event import (
    RatioExperimentConfig, RMSEGrid, _CommonDraws, _trial_estimates, default_grids, empirical_rmse,
    empirical_rmse_grid, estimator_moments, exact_mmse, predicted_rmse, ratio_mmse,
)


def quad_moments(c):
    """B, E_q[(w L)^2] and E_q[x^2 (w L)^2] by direct quadrature."""
    lam, lt, s, y = c.lam, c.lam_tilde, c.sigma_y, c.y
    p = lambda x: 0.5 * lam * math.exp(-lam * abs(x))
    q = lambda x: 0.5 * lt * math.exp(-lt * abs(x))
    L = lambda x: math.exp(-0.5 * ((x - y) / s) ** 2) / (s * math.sqrt(2 * math.pi))
    kw = dict(points=[0.0, y], limit=500)
    B = integrate.quad(lambda x: p(x) * L(x), -60, 60, **kw)[0]
    A = integrate.quad(lambda x: x * p(x) * L(x), -60, 60, **kw)[0]
    Mbb = integrate.quad(lambda x: p(x) ** 2 / q(x) * L(x) ** 2, -60, 60, **kw)[0]
    Maa = integrate.quad(lambda x: x * x * p(x) ** 2 / q(x) * L(x) ** 2, -60, 60, **kw)[0]
    return A, B, Maa, Mbb


def test_config_validation():
    with pytest.raises(ValueError):
        RatioExperimentConfig(dims=3)
    with pytest.raises(ValueError):
        RatioExperimentConfig(N=1)
    with pytest.raises(ValueError):
        RatioExperimentConfig(lam=0.0)
    c = RatioExperimentConfig().with_sigma_tilde(4.0)
    assert c.sigma_tilde == pytest.approx(4.0)
    assert RatioExperimentConfig().sigma_L == pytest.approx(math.sqrt(2))


def test_ratio_mmse_equal_likelihoods_gives_weighted_mean():
    x = np.array([1.0, 2.0, 4.0])
    w = np.array([0.2, 0.3, 0.5])
    assert ratio_mmse(x, w, np.ones(3)) == pytest.approx(w @ x)


def test_ratio_mmse_dominant_particle():
    x = np.array([1.0, 2.0, 4.0])
    assert ratio_mmse(x, np.ones(3), lambda v: (v == 2.0).astype(float)) == 2.0


def test_ratio_mmse_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        ratio_mmse(np.ones(3), np.ones(3), np.zeros(3))


def test_ratio_mmse_uses_first_column():
    x = np.array([[1.0, 9.0], [3.0, 9.0]])
    assert ratio_mmse(x, np.ones(2), np.ones(2)) == 2.0


def test_exact_mmse_cases():
    assert exact_mmse(RatioExperimentConfig(y=0.0)) == pytest.approx(0.0, abs=1e-10)
    # far in the tail the posterior is the Gaussian shifted by lambda sigma^2
    assert exact_mmse(RatioExperimentConfig(y=6.0)) == pytest.approx(5.0, abs=1e-3)
    c = RatioExperimentConfig(y=6.0)
    A, B, _, _ = quad_moments(c)
    assert exact_mmse(c) == pytest.approx(A / B, rel=1e-8)


def test_million_particle_estimate_with_optimal_proposal():
    c = RatioExperimentConfig(y=6.0, N=1_000_000, trials=1).with_sigma_tilde(math.sqrt(2) * 6)
    est = _trial_estimates(c, _CommonDraws(1, c.N, 1, np.random.default_rng(3)))[0]
    assert est == pytest.approx(5.0, abs=0.1)


@pytest.mark.parametrize("y,s", [(6.0, 6 * math.sqrt(2)), (8.0, math.sqrt(2)), (8.0, 8.0)])
def test_estimator_moments_against_quadrature(y, s):
    c = RatioExperimentConfig(y=y).with_sigma_tilde(s)
    A, B, Maa, Mbb = quad_moments(c)
    m = estimator_moments(c)
    assert m["B"] == pytest.approx(B, rel=1e-6)
    assert m["A"] == pytest.approx(A, rel=1e-4)
    assert m["var_B"] == pytest.approx((Mbb - B * B) / c.N, rel=1e-6)
    assert m["var_A"] == pytest.approx((Maa - A * A) / c.N, rel=1e-3)


def test_predicted_rmse_flags():
    assert predicted_rmse(RatioExperimentConfig(y=0.0)).status == "approximation invalid"
    inf = predicted_rmse(RatioExperimentConfig(y=6.0, lam_tilde=2.5))
    assert inf.status == "infinite variance" and math.isinf(inf.value)
    p = predicted_rmse(RatioExperimentConfig(y=6.0).with_sigma_tilde(8.0))
    assert p.status == "ok" and p.value > 0 and p.log10 < 0


def test_predicted_optimum_at_y4():
    s = np.logspace(0, 1.3, 300)
    v = [predicted_rmse(RatioExperimentConfig(y=4.0).with_sigma_tilde(x)).value for x in s]
    assert 4.5 <= s[int(np.argmin(v))] <= 6.8


def test_first_moments_unaffected_by_proposal(rng):
    y = 3.0
    base = RatioExperimentConfig(y=y)
    means = []
    for s in (base.sigma_L, 4.0, 8.0):
        c = base.with_sigma_tilde(s)
        x = rng.choice([-1.0, 1.0], 400_000) * rng.standard_exponential(400_000) / c.lam_tilde
        w = (c.lam / c.lam_tilde) * np.exp(-(c.lam - c.lam_tilde) * np.abs(x))
        bl = w * np.exp(-0.5 * (x - y) ** 2) / math.sqrt(2 * math.pi)
        means.append((bl.mean(), bl.std() / math.sqrt(x.size)))
    B = estimator_moments(base)["B"]
    _, Bq, _, _ = quad_moments(base)
    for m, se in means:
        assert abs(m - Bq) < 3 * se + 1e-12
    assert B > 0


def test_rmse_smallest_near_prior_width_at_y0():
    c = RatioExperimentConfig(y=0.0, trials=300, N=500)
    draws = _CommonDraws(c.trials, c.N, 1, np.random.default_rng(4))
    s = np.array([c.sigma_L, 3.0, 6.0, 12.0])
    r = [empirical_rmse(c.with_sigma_tilde(v), draws=draws) for v in s]
    assert int(np.argmin(r)) == 0


def test_rmse_decreases_with_particles():
    r = []
    for n in (1000, 10_000, 100_000):
        c = RatioExperimentConfig(y=4.0, N=n, trials=40).with_sigma_tilde(4 * math.sqrt(2))
        r.append(empirical_rmse(c, np.random.default_rng(n)))
    assert r[0] > r[1] > r[2]


def test_six_dim_optimum_is_smaller():
    y, s = np.array([5.0]), np.logspace(math.log10(math.sqrt(2)), math.log10(20.0), 9)
    one = empirical_rmse_grid(y, s, RatioExperimentConfig(trials=200, N=1000), np.random.default_rng(5),
                              with_predicted=False)
    six = empirical_rmse_grid(y, s, RatioExperimentConfig(trials=200, N=1000, dims=6),
                              np.random.default_rng(5), with_predicted=False)
    assert six.argmin_sigma()[0] < one.argmin_sigma()[0]


def test_grid_shapes_and_csv(tmp_path):
    y, s = default_grids(3, 6.0, 10.0)
    assert y[0] == 0.0 and s[0] == pytest.approx(math.sqrt(2)) and s[-1] == pytest.approx(10.0)
    g = empirical_rmse_grid(y, s, RatioExperimentConfig(trials=20, N=200), np.random.default_rng(6))
    assert g.empirical.shape == (3, 3) and np.all(g.empirical >= 0)
    g.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "y,sigma_tilde,rmse_empirical,rmse_predicted,status" and len(lines) == 10
    with pytest.raises(ValueError):
        empirical_rmse_grid([], s, RatioExperimentConfig())


def test_refined_argmin_recovers_parabola_vertex():
    s = np.logspace(0, 1, 11)
    ls = np.log(s)
    true = np.log(3.3)
    emp = np.exp((ls - true) ** 2 + 1.0)[None, :]
    g = RMSEGrid(np.array([1.0]), s, emp, emp, np.full(emp.shape, "ok", dtype=object))
    assert g.argmin_sigma(refine=True)[0] == pytest.approx(3.3, rel=1e-9)
    assert g.argmin_sigma()[0] in s
