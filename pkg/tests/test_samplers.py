import numpy as np
import pytest
from scipy import integrate, stats

from urban_structure import HyperParams, SpatialSystem, Theta
from urban_structure.model import potential_and_grad
from urban_structure.errors import InvalidParameterError
from urban_structure.samplers import (
    AisConfig,
    HmcConfig,
    ais_log_z,
    base_log_density,
    hmc_step,
    leapfrog,
    log_z_base,
    parallel_tempering_sample,
    reflect_into_box,
    reflect_log_q,
    rw_reflect_step,
    sample_base,
    swap_log_accept,
    tempering_ladder,
)

from oracles import log_z_adaptive_2d


def std_normal(x):
    return -0.5 * np.sum(x * x, axis=-1), -x


def test_zero_step_leaves_state_and_accepts(rng):
    x = np.array([0.3, -1.2])
    x_new, acc = hmc_step(x, std_normal, HmcConfig(0.0, 5), rng)
    np.testing.assert_array_equal(x_new, x)
    assert acc


def test_leapfrog_energy_error_is_second_order(rng):
    x = rng.normal(size=3)
    p = rng.normal(size=3)
    errs = []
    for eps in (0.02, 0.01):
        n = int(round(0.4 / eps))
        x1, p1, logp1, _ = leapfrog(x, p, std_normal, eps, n)
        errs.append(abs((-logp1 + 0.5 * p1 @ p1) - (-std_normal(x)[0] + 0.5 * p @ p)))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_hmc_recovers_gaussian_moments(rng):
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    prec = np.linalg.inv(cov)
    mean = np.array([1.0, -2.0])

    def target(x):
        d = x - mean
        return -0.5 * np.sum(d @ prec * d, axis=-1), -(d @ prec)

    # 200 independent chains advanced together.
    x = np.zeros((200, 2))
    cfg = HmcConfig(0.3, 8)
    draws = []
    for i in range(400):
        x, _ = hmc_step(x, target, cfg, rng)
        if i >= 100:
            draws.append(x.copy())
    draws = np.array(draws)  # (300, 200, 2)
    chain_means = draws.mean(axis=0)
    se = chain_means.std(axis=0, ddof=1) / np.sqrt(200)
    assert np.all(np.abs(chain_means.mean(axis=0) - mean) < 3 * se)
    chain_vars = draws.var(axis=0)
    se_v = chain_vars.std(axis=0, ddof=1) / np.sqrt(200)
    assert np.all(np.abs(chain_vars.mean(axis=0) - np.diag(cov)) < 3 * se_v + 0.02)


def test_nonfinite_energy_is_rejected(rng):
    def cliff(x):
        logp = np.where(x[..., 0] > 0.5, np.nan, -0.5 * np.sum(x * x, axis=-1))
        return logp, -x

    x = np.full((50, 1), 0.45)
    x_new, acc = hmc_step(x, cliff, HmcConfig(0.5, 3), rng)
    assert np.all(np.isfinite(x_new))
    assert np.all(x_new[~acc] == 0.45)


@pytest.mark.parametrize("raw, folded", [(2.3, 1.7), (-0.1, 0.1), (4.3, 0.3), (-2.5, 1.5), (1.0, 1.0)])
def test_reflection_folds_into_box(raw, folded):
    assert reflect_into_box(raw, 0.0, 2.0) == pytest.approx(folded, abs=1e-12)


def test_reflected_proposal_is_symmetric(rng):
    # Discretise [0, 2] into 20 cells and compare transition counts both ways.
    n_draws, n_cells = 10_000_000, 20
    start = rng.uniform(0, 2, n_draws)
    end = rw_reflect_step(start, 0.5, 0.0, 2.0, rng)
    assert np.all((end >= 0) & (end <= 2))
    a = np.minimum((start * n_cells / 2).astype(int), n_cells - 1)
    b = np.minimum((end * n_cells / 2).astype(int), n_cells - 1)
    counts = np.zeros((n_cells, n_cells))
    np.add.at(counts, (a, b), 1)
    q = counts / n_draws
    assert np.max(np.abs(q - q.T)) < 1e-3


CORR_CHOL = np.linalg.cholesky(np.array([[0.09, 0.072], [0.072, 0.09]]))


def test_folded_density_integrates_to_one():
    # Near a corner most of the unfolded mass lands outside the box.
    frm = np.array([0.1, 1.85])
    u = np.linspace(0.0, 2.0, 201)
    dens = np.exp([[reflect_log_q(np.array([a, b]), frm, CORR_CHOL, 0.0, 2.0) for b in u] for a in u])
    assert integrate.trapezoid(integrate.trapezoid(dens, u, axis=1), u) == pytest.approx(1.0, abs=1e-4)


def test_folded_density_symmetric_for_diagonal_scale():
    chol = np.diag([0.3, 0.2])
    a, b = np.array([0.05, 1.9]), np.array([0.4, 1.7])
    assert reflect_log_q(a, b, chol, 0, 2) == pytest.approx(reflect_log_q(b, a, chol, 0, 2), rel=1e-12)
    assert reflect_log_q(a, b, CORR_CHOL, 0, 2) != pytest.approx(reflect_log_q(b, a, CORR_CHOL, 0, 2))


def test_correlated_folded_walk_leaves_uniform_invariant(rng):
    # Many independent chains targeting the uniform law on the box, with
    # the Hastings correction; occupancy must stay uniform. Without the
    # correction mass drains from the corners and this fails badly.
    n, steps, cells = 1000, 20, 4
    theta = rng.uniform(0, 2, (n, 2))
    for _ in range(steps):
        prop = rw_reflect_step(theta, CORR_CHOL, 0.0, 2.0, rng)
        log_r = np.array([reflect_log_q(t, p, CORR_CHOL, 0, 2) - reflect_log_q(p, t, CORR_CHOL, 0, 2)
                          for t, p in zip(theta, prop)])
        accept = np.log(rng.random(n)) < log_r
        theta[accept] = prop[accept]
    idx = np.minimum((theta * cells / 2).astype(int), cells - 1)
    counts = np.zeros((cells, cells))
    np.add.at(counts, (idx[:, 0], idx[:, 1]), 1)
    assert stats.chisquare(counts.ravel()).pvalue > 0.01


def test_ladder_is_geometric():
    g = tempering_ladder(1000.0, 5)
    assert g[0] == 1000.0
    assert g[-1] == pytest.approx(1000.0 / 32)
    np.testing.assert_allclose(g[1:] / g[:-1], g[1] / g[0])


def test_identical_temperatures_always_swap():
    assert swap_log_accept(50.0, 50.0, 3.2, -1.0) == 0.0


def test_single_level_tempering_is_plain_hmc(symmetric_pair):
    system, theta, hyper = symmetric_pair
    step = 0.05
    out = parallel_tempering_sample(system, theta, hyper, n_levels=1, chain_len=30,
                                    rng=np.random.default_rng(4), n_burn=0, step_size=step)

    def target(z):
        v, g = potential_and_grad(system, theta, hyper, z)
        return -hyper.gamma * v, -hyper.gamma * g

    rng = np.random.default_rng(4)
    x = np.full((1, 2), np.log(hyper.K / 2))
    ref = []
    for _ in range(30):
        x, _ = hmc_step(x, target, HmcConfig(np.array([step]), 10), rng)
        ref.append(x[0].copy())
    np.testing.assert_array_equal(out, np.array(ref))


def test_tempering_crosses_between_modes():
    system = SpatialSystem([0.5, 0.5], [[0.0, 1.0], [1.0, 0.0]])
    theta = Theta(2.0, 0.5)
    hyper = HyperParams(gamma=100.0, delta=0.05, kappa=1.1)
    x0 = np.log([0.9, 0.05])
    pt = parallel_tempering_sample(system, theta, hyper, n_levels=5, chain_len=10_000,
                                   rng=np.random.default_rng(1), x0=x0, n_burn=500)
    first = np.mean(pt[:, 0] > pt[:, 1])
    assert 0.05 < first < 0.95
    plain = parallel_tempering_sample(system, theta, hyper, n_levels=1, chain_len=10_000,
                                      rng=np.random.default_rng(1), x0=x0, n_burn=500)
    assert np.mean(plain[:, 0] > plain[:, 1]) > 0.99


def test_base_mean_matches_gamma_moment(rng):
    hyper = HyperParams(gamma=100.0, delta=0.006, kappa=1.3)
    w = np.exp(sample_base(hyper, 3, rng, size=100_000))
    se = w.std(axis=0, ddof=1) / np.sqrt(w.shape[0])
    assert np.all(np.abs(w.mean(axis=0) - 0.006 / 1.3) < 3 * se)


def test_base_normaliser_matches_quadrature():
    hyper = HyperParams(gamma=100.0, delta=0.006, kappa=1.3)
    a, b = 0.6, 130.0
    val, _ = integrate.quad(lambda x: np.exp(a * x - b * np.exp(x)), -60, 10,
                            points=[-12, -6, -3, 0], epsabs=0, epsrel=1e-12, limit=500)
    assert np.exp(log_z_base(hyper, 1)) == pytest.approx(val, rel=1e-8)
    assert log_z_base(hyper, 4) == pytest.approx(4 * np.log(val), rel=1e-8)


def test_base_density_ratio_matches_gamma_law():
    hyper = HyperParams(gamma=50.0, delta=0.1, kappa=1.2)
    a, b = 5.0, 60.0
    x1, x2 = np.array([-2.0]), np.array([-1.3])
    # Change of variables: p_x(x) = p_W(e^x) e^x.
    law = stats.gamma(a, scale=1 / b)
    expected = np.log(law.pdf(np.exp(x1[0])) * np.exp(x1[0])) - np.log(law.pdf(np.exp(x2[0])) * np.exp(x2[0]))
    got = base_log_density(hyper, x1) - base_log_density(hyper, x2)
    assert got == pytest.approx(expected, rel=1e-12)


def test_base_rejects_bad_parameters():
    with pytest.raises(InvalidParameterError):
        log_z_base(HyperParams(gamma=np.inf, delta=0.1, kappa=1.0), 2)


def test_ais_exact_when_target_is_base(rng):
    system = SpatialSystem([0.0, 0.0], [[0.0, 1.0], [1.0, 0.0]])
    hyper = HyperParams(gamma=100.0, delta=0.05, kappa=1.1)
    res = ais_log_z(system, Theta(1.0, 1.0), hyper, AisConfig(), rng, n_runs=3)
    np.testing.assert_allclose(res.log_weights, 0.0, atol=1e-9)
    np.testing.assert_allclose(res.log_z, log_z_base(hyper, 2), atol=1e-9)


def test_ais_is_unbiased_against_quadrature(symmetric_pair, rng):
    system, theta, hyper = symmetric_pair
    log_exact = log_z_adaptive_2d(system, theta, hyper)[0]
    res = ais_log_z(system, theta, hyper, AisConfig(), rng, n_runs=100)
    ratio = np.exp(res.log_z - log_exact)
    se = ratio.std(ddof=1) / np.sqrt(ratio.size)
    assert abs(ratio.mean() - 1) < 3 * se


def test_ais_runs_are_reproducible(symmetric_pair):
    system, theta, hyper = symmetric_pair
    a = ais_log_z(system, theta, hyper, AisConfig(), np.random.default_rng(3), n_runs=2)
    b = ais_log_z(system, theta, hyper, AisConfig(), np.random.default_rng(3), n_runs=2)
    np.testing.assert_array_equal(a.log_weights, b.log_weights)


def test_finer_annealing_lowers_weight_variance():
    system = SpatialSystem([0.6, 0.4], [[0.0, 2.0], [1.5, 0.3]])
    theta = Theta(0.9, 0.5)
    hyper = HyperParams(gamma=100.0, delta=0.006, kappa=1.012)
    rng = np.random.default_rng(11)
    coarse = ais_log_z(system, theta, hyper, AisConfig(n_temperatures=10, n_leapfrog=5), rng, n_runs=100)
    fine = ais_log_z(system, theta, hyper, AisConfig(n_temperatures=200, n_leapfrog=5), rng, n_runs=100)
    assert fine.log_weights.var() < coarse.log_weights.var()
