"""MCMC kernels and annealed importance sampling for z(theta).

Kernels work on a single state of shape ``(M,)`` or on a batch of
independent states of shape ``(B, M)``; a target is any callable
returning ``(log_density, gradient)`` with matching leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, logsumexp

from .errors import InvalidParameterError, NumericalError
from .model import (
    HyperParams,
    SpatialSystem,
    Theta,
    hessian_potential,
    potential,
    potential_and_grad,
)


@dataclass
class HmcConfig:
    step_size: float | np.ndarray = 0.1
    n_leapfrog: int = 10

    def __post_init__(self):
        if np.any(np.asarray(self.step_size) < 0):
            raise InvalidParameterError("step_size must be nonnegative")
        if self.n_leapfrog < 1:
            raise InvalidParameterError("n_leapfrog must be at least 1")


def _column(a, x):
    """Broadcast a per-state scalar or array against states ``x``."""
    a = np.asarray(a, dtype=float)
    return a[..., None] if a.ndim and a.ndim == x.ndim - 1 else a


def leapfrog(x, p, target, step_size, n_steps, grad=None):
    """Velocity-Verlet integration of Hamiltonian dynamics.

    Returns ``(x, p, log_density, grad)`` at the end of the trajectory.
    """
    eps = _column(step_size, x)
    if grad is None:
        _, grad = target(x)
    with np.errstate(over="ignore", invalid="ignore"):
        p = p + 0.5 * eps * grad
        for i in range(n_steps):
            x = x + eps * p
            logp, grad = target(x)
            if i < n_steps - 1:
                p = p + eps * grad
        p = p + 0.5 * eps * grad
    return x, p, logp, grad


def hmc_step(x, target, cfg: HmcConfig, rng: np.random.Generator):
    """One HMC transition with identity mass matrix.

    Nonfinite energies are rejected, never raised. Returns the new state
    and a boolean (array) of acceptances.
    """
    x = np.asarray(x, dtype=float)
    logp0, grad0 = target(x)
    p0 = rng.standard_normal(x.shape)
    x1, p1, logp1, _ = leapfrog(x, p0, target, cfg.step_size, cfg.n_leapfrog, grad0)
    with np.errstate(over="ignore", invalid="ignore"):
        h0 = -logp0 + 0.5 * (p0 * p0).sum(axis=-1)
        h1 = -logp1 + 0.5 * (p1 * p1).sum(axis=-1)
        log_acc = h0 - h1
        finite = np.isfinite(log_acc) & np.all(np.isfinite(x1), axis=-1)
    log_acc = np.where(finite, log_acc, -np.inf)
    accept = np.log(rng.random(np.shape(log_acc))) < log_acc
    x_new = np.where(np.asarray(accept)[..., None], x1, x)
    return x_new, accept


def reflect_into_box(v, lo, hi):
    """Fold values into [lo, hi] by repeated reflection at the walls."""
    v = np.asarray(v, dtype=float)
    width = hi - lo
    r = np.mod(v - lo, 2 * width)
    return lo + np.where(r > width, 2 * width - r, r)


def rw_reflect_step(theta, step_scale, lo, hi, rng: np.random.Generator) -> np.ndarray:
    """Gaussian random-walk proposal folded into the box [lo, hi]^d.

    ``step_scale`` is a scalar, a vector of per-coordinate scales, or a
    lower-triangular factor L of the proposal covariance. Coordinatewise
    folding keeps the proposal symmetric for scalar and vector scales. A
    full factor breaks that symmetry, and ``reflect_log_q`` supplies the
    Hastings correction.
    """
    theta = np.asarray(theta, dtype=float)
    step = np.asarray(step_scale, dtype=float)
    xi = rng.standard_normal(theta.shape)
    raw = theta + (xi @ step.T if step.ndim == 2 else step * xi)
    return reflect_into_box(raw, lo, hi)


def reflect_log_q(to, frm, chol, lo, hi, n_sd: float = 12.0) -> float:
    """Log density of the folded proposal ``rw_reflect_step`` from ``frm`` to ``to``.

    The unfolded Gaussian N(frm, L L^T) is summed over every mirror image
    of ``to`` within ``n_sd`` proposal standard deviations of ``frm``;
    the images of t are t + 2kw and 2 lo - t + 2kw for box width w.
    """
    to = np.asarray(to, dtype=float)
    frm = np.asarray(frm, dtype=float)
    chol = np.asarray(chol, dtype=float)
    d = frm.size
    width = hi - lo
    sd = np.sqrt(np.sum(chol ** 2, axis=1))
    images = []
    for j in range(d):
        reach = n_sd * sd[j]
        k = np.arange(np.floor((frm[j] - reach - hi) / (2 * width)) - 1,
                      np.ceil((frm[j] + reach - lo) / (2 * width)) + 2)
        cand = np.concatenate([to[j] + 2 * k * width, 2 * lo - to[j] + 2 * k * width])
        images.append(cand[np.abs(cand - frm[j]) <= reach])
    if any(im.size == 0 for im in images):
        return -np.inf
    pts = np.stack(np.meshgrid(*images, indexing="ij"), axis=-1).reshape(-1, d)
    z = solve_triangular(chol, (pts - frm).T, lower=True)
    log_phi = (-0.5 * np.sum(z * z, axis=0) - np.log(np.abs(np.diag(chol))).sum()
               - 0.5 * d * np.log(2 * np.pi))
    return float(logsumexp(log_phi))


# --- Log-gamma base distribution ----------------------------------------


def base_shape_rate(hyper: HyperParams, inflow: float = 0.0) -> tuple[float, float]:
    """Gamma shape and rate of each W_j = exp(x_j) under the base.

    ``inflow`` adds a uniform demand per zone to the additional term; with
    ``inflow = sum(O) / M`` the base is the alpha, beta -> 0 limit of
    exp(-gamma V).
    """
    shape = hyper.gamma * hyper.epsilon * (hyper.delta + inflow)
    rate = hyper.gamma * hyper.epsilon * hyper.kappa
    if not (np.isfinite(shape) and np.isfinite(rate) and shape > 0 and rate > 0):
        raise InvalidParameterError(f"invalid gamma shape/rate ({shape}, {rate})")
    return shape, rate


def log_z_base(hyper: HyperParams, M: int, inflow: float = 0.0) -> float:
    """Exact log normaliser of prod_j exp(a x_j - b e^{x_j})."""
    a, b = base_shape_rate(hyper, inflow)
    return M * (gammaln(a) - a * np.log(b))


def base_log_density(hyper: HyperParams, x, inflow: float = 0.0) -> np.ndarray:
    """Unnormalised log base density a x - b e^x summed over zones."""
    x = np.asarray(x, dtype=float)
    eps_g = hyper.gamma * hyper.epsilon
    return -eps_g * (hyper.kappa * np.exp(x).sum(axis=-1) - (hyper.delta + inflow) * x.sum(axis=-1))


def sample_base(hyper: HyperParams, M: int, rng: np.random.Generator, size=None,
                inflow: float = 0.0) -> np.ndarray:
    """Draw log-sizes with W_j ~ Gamma(a, b) independently.

    For shape below one, log W = log G(a + 1) + log(U) / a, which stays
    finite when W itself would underflow.
    """
    a, b = base_shape_rate(hyper, inflow)
    shape = (M,) if size is None else tuple(np.atleast_1d(size)) + (M,)
    if a < 1:
        logw = np.log(rng.gamma(a + 1.0, size=shape)) + np.log(rng.random(shape)) / a
    else:
        logw = np.log(rng.gamma(a, size=shape))
    return logw - np.log(b)


# --- Parallel tempering ---------------------------------------------------


def tempering_ladder(gamma: float, n_levels: int, ratio: float = 32.0) -> np.ndarray:
    """Geometric inverse temperatures from gamma (cold) down to gamma / ratio."""
    if n_levels < 1:
        raise InvalidParameterError("n_levels must be at least 1")
    if n_levels == 1:
        return np.array([gamma])
    return gamma * ratio ** (-np.arange(n_levels) / (n_levels - 1))


def swap_log_accept(gamma_a, gamma_b, v_a, v_b):
    """Log acceptance of exchanging states between two tempered chains."""
    return np.minimum(0.0, (gamma_a - gamma_b) * (v_a - v_b))


def default_step_size(hyper: HyperParams, gamma: float | np.ndarray | None = None, scale: float = 0.7):
    """Leapfrog step matched to the stiffest direction, sqrt(gamma eps kappa K)."""
    g = hyper.gamma if gamma is None else gamma
    return scale / np.sqrt(g * hyper.epsilon * hyper.kappa * hyper.K)


@dataclass
class TemperingStats:
    gammas: np.ndarray
    step_sizes: np.ndarray
    hmc_acceptance: np.ndarray
    swap_acceptance: np.ndarray


def adapt_step(step, acc_rate, target=0.9, rate=0.5):
    """Multiplicative Robbins-Monro update towards a target acceptance."""
    return step * np.exp(rate * (acc_rate - target))


def parallel_tempering_sample(system: SpatialSystem, theta: Theta, hyper: HyperParams,
                              n_levels: int = 5, chain_len: int = 10_000,
                              rng: np.random.Generator | None = None, *,
                              x0=None, n_burn: int = 1000, n_leapfrog: int = 10,
                              step_size=None, ratio: float = 32.0, target_accept: float = 0.9,
                              return_stats: bool = False):
    """HMC within each tempered level plus adjacent swap moves.

    Returns the cold-level states of shape ``(chain_len, M)``. Step sizes
    adapt during the ``n_burn`` burn-in sweeps and are frozen afterwards.
    """
    rng = rng or np.random.default_rng()
    gammas = tempering_ladder(hyper.gamma, n_levels, ratio)
    steps = (np.asarray(step_size, dtype=float) * np.ones(n_levels) if step_size is not None
             else default_step_size(hyper, gammas))
    if x0 is None:
        x = np.tile(np.full(system.M, np.log(hyper.K / system.M)), (n_levels, 1))
    else:
        x = np.broadcast_to(np.asarray(x0, dtype=float), (n_levels, system.M)).copy()

    def target(z):
        v, g = potential_and_grad(system, theta, hyper, z)
        return -gammas * v, -gammas[:, None] * g

    out = np.empty((chain_len, system.M))
    acc_sum = np.zeros(n_levels)
    swap_tries = np.zeros(max(n_levels - 1, 1))
    swap_acc = np.zeros_like(swap_tries)
    window = np.zeros(n_levels)
    for sweep in range(n_burn + chain_len):
        x, accepted = hmc_step(x, target, HmcConfig(steps, n_leapfrog), rng)
        if sweep < n_burn:
            window += accepted
            if (sweep + 1) % 20 == 0:
                steps = adapt_step(steps, window / 20, target_accept)
                window[:] = 0
        else:
            acc_sum += accepted
        if n_levels > 1:
            v = potential(system, theta, hyper, x)
            for k in range(sweep % 2, n_levels - 1, 2):
                log_a = swap_log_accept(gammas[k], gammas[k + 1], v[k], v[k + 1])
                if sweep >= n_burn:
                    swap_tries[k] += 1
                if np.log(rng.random()) < log_a:
                    x[[k, k + 1]] = x[[k + 1, k]]
                    v[[k, k + 1]] = v[[k + 1, k]]
                    if sweep >= n_burn:
                        swap_acc[k] += 1
        if sweep >= n_burn:
            out[sweep - n_burn] = x[0]
    if return_stats:
        stats = TemperingStats(
            gammas, steps, acc_sum / max(chain_len, 1),
            np.divide(swap_acc, swap_tries, out=np.zeros_like(swap_acc), where=swap_tries > 0),
        )
        return out, stats
    return out


# --- Annealed importance sampling ----------------------------------------


@dataclass
class AisConfig:
    """Annealing schedule and starting distribution for AIS.

    ``base="loggamma"`` starts from the alpha, beta -> 0 limit of the
    model. ``base="laplace"`` starts from a defensive mixture that puts
    weight ``1 - defensive`` on the Gaussian at the global minimum of V and
    ``defensive`` on the log-gamma law, which keeps the tails covered.
    """

    n_particles: int = 10
    n_temperatures: int = 50
    n_leapfrog: int = 10
    step_scale: float = 0.7
    base: str = "loggamma"
    defensive: float = 0.05

    def __post_init__(self):
        if self.n_particles < 1:
            raise InvalidParameterError("n_particles must be at least 1")
        if self.n_temperatures < 2:
            raise InvalidParameterError("n_temperatures must be at least 2")
        if self.n_leapfrog < 1:
            raise InvalidParameterError("n_leapfrog must be at least 1")
        if self.base not in ("loggamma", "laplace"):
            raise InvalidParameterError(f"unknown AIS base {self.base!r}")
        if not 0 < self.defensive <= 1:
            raise InvalidParameterError("defensive weight must lie in (0, 1]")

    @property
    def temperatures(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_temperatures)


@dataclass
class AisResult:
    """Per-run log estimates of z and the particle log-weights behind them."""

    log_z: np.ndarray
    log_weights: np.ndarray
    log_z_base: float
    acceptance: float

    @property
    def estimate(self) -> np.ndarray:
        return np.exp(self.log_z)


class LogGammaBase:
    """Independent log-gamma coordinates; see ``sample_base``."""

    def __init__(self, hyper: HyperParams, M: int, inflow: float):
        self.hyper, self.M, self.inflow = hyper, M, inflow
        self.shape_term = hyper.delta + inflow
        self.eg = hyper.gamma * hyper.epsilon
        self.log_z = log_z_base(hyper, M, inflow)

    def sample(self, rng, n):
        return sample_base(self.hyper, self.M, rng, size=n, inflow=self.inflow)

    def log_density(self, z):
        """Unnormalised log density and its gradient."""
        with np.errstate(over="ignore"):
            w = np.exp(z)
        lb = -self.eg * (self.hyper.kappa * w.sum(axis=-1) - self.shape_term * z.sum(axis=-1))
        return lb, -self.eg * (self.hyper.kappa * w - self.shape_term)


class LaplaceMixtureBase:
    """Normalised mixture of N(m, (gamma H)^-1) and the log-gamma law."""

    def __init__(self, system, theta, hyper, inflow: float, defensive: float):
        from .optimize import global_minimum, log_det_spd

        m = global_minimum(system, theta, hyper)
        prec = hyper.gamma * hessian_potential(system, theta, hyper, m.x_star)
        self.mean = m.x_star
        self.prec = prec
        self.chol = np.linalg.cholesky(prec)
        self.log_norm = 0.5 * log_det_spd(prec) - 0.5 * system.M * np.log(2 * np.pi)
        self.tail = LogGammaBase(hyper, system.M, inflow)
        self.defensive = defensive
        self.M = system.M
        self.log_z = 0.0

    def sample(self, rng, n):
        xi = rng.standard_normal((n, self.M))
        gauss = self.mean + np.linalg.solve(self.chol.T, xi.T).T
        pick_tail = rng.random(n) < self.defensive
        if pick_tail.any():
            gauss[pick_tail] = self.tail.sample(rng, int(pick_tail.sum()))
        return gauss

    def log_density(self, z):
        d = z - self.mean
        pd = d @ self.prec
        lg = self.log_norm - 0.5 * np.sum(pd * d, axis=-1)
        gg = -pd
        lt, gt = self.tail.log_density(z)
        lt = lt - self.tail.log_z
        with np.errstate(divide="ignore"):
            a = np.log1p(-self.defensive) + lg
        b = np.log(self.defensive) + lt
        top = np.logaddexp(a, b)
        with np.errstate(invalid="ignore"):
            wa = np.exp(a - top)[..., None]
        wa = np.where(np.isfinite(wa), wa, 0.0)
        gt = np.where(np.isfinite(gt), gt, 0.0)
        return top, wa * gg + (1 - wa) * gt


def ais_log_z(system: SpatialSystem, theta: Theta, hyper: HyperParams, cfg: AisConfig,
              rng: np.random.Generator, n_runs: int = 1, inflow=None) -> AisResult:
    """Annealed importance sampling estimate of z(theta).

    Particles start from the configured base and anneal along
    pi_t ~ base^(1-t) exp(-gamma V)^t with one HMC transition per rung.
    ``n_runs`` independent estimates are computed as one vectorised batch;
    each is unbiased for z(theta). The log-gamma base uses ``inflow``
    (default sum(O) / M, the alpha, beta -> 0 limit).
    """
    inflow = system.total_origin / system.M if inflow is None else inflow
    if cfg.base == "laplace":
        base = LaplaceMixtureBase(system, theta, hyper, inflow, cfg.defensive)
    else:
        base = LogGammaBase(hyper, system.M, inflow)
    lzb = base.log_z
    n = n_runs * cfg.n_particles
    x = base.sample(rng, n)
    temps = cfg.temperatures
    step = default_step_size(hyper, scale=cfg.step_scale)
    hmc = HmcConfig(step, cfg.n_leapfrog)

    def log_ratio(z):
        # log f_target - log f_base
        return -hyper.gamma * potential(system, theta, hyper, z) - base.log_density(z)[0]

    log_w = np.zeros(n)
    accepted = 0
    for k in range(1, len(temps)):
        t, dt = temps[k], temps[k] - temps[k - 1]
        with np.errstate(over="ignore", invalid="ignore"):
            log_w += dt * log_ratio(x)
        if k == len(temps) - 1:
            break

        def target(z, t=t):
            v, g = potential_and_grad(system, theta, hyper, z)
            lb, gb = base.log_density(z)
            return (1 - t) * lb - t * hyper.gamma * v, (1 - t) * gb - t * hyper.gamma * g

        x, acc = hmc_step(x, target, hmc, rng)
        accepted += int(np.sum(acc))
    log_w = log_w.reshape(n_runs, cfg.n_particles)
    finite = np.isfinite(log_w)
    if not np.any(finite):
        raise NumericalError("every AIS particle produced a nonfinite weight")
    log_w = np.where(finite, log_w, -np.inf)
    log_z = lzb + logsumexp(log_w, axis=1) - np.log(cfg.n_particles)
    acceptance = accepted / (n * max(len(temps) - 2, 1))
    return AisResult(log_z, log_w, lzb, acceptance)
