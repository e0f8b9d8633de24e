"""Bayesian recovery of (alpha, beta) from one observed configuration.

Two Metropolis-within-Gibbs samplers share the same skeleton and differ
only in how 1/z(theta) enters the theta-acceptance ratio:

* ``saddle_gibbs_chain`` plugs in the saddle-point approximation (biased,
  sign-free);
* ``pm_gibbs_chain`` plugs in unbiased Russian-roulette estimates of
  1/z(theta), whose signs are carried as weights Omega.

Reciprocal normaliser estimates are kept as ``(sign, log|S|)`` pairs:
for low-noise models 1/z is far outside double range.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from .errors import (
    ConvergenceError,
    EstimatorUndefinedError,
    InvalidParameterError,
    NumericalError,
)
from .model import (
    HyperParams,
    SpatialSystem,
    Theta,
    grad_log_likelihood,
    log_likelihood,
    potential,
    potential_and_grad,
)
from .optimize import saddle_point_log_z
from .samplers import (
    AisConfig,
    HmcConfig,
    adapt_step,
    ais_log_z,
    hmc_step,
    reflect_log_q,
    rw_reflect_step,
)

log = logging.getLogger(__name__)


# --- Grid evaluation -------------------------------------------------------


def grid_axis(n: int, lo: float = 0.0, hi: float = 2.0) -> np.ndarray:
    """``n`` equally spaced values in (lo, hi], excluding the invalid lower edge."""
    return lo + (hi - lo) * np.arange(1, n + 1) / n


@dataclass
class GridResult:
    alphas: np.ndarray
    betas: np.ndarray
    log_post: np.ndarray
    error_mask: np.ndarray

    def argmax(self) -> tuple[float, float]:
        masked = np.where(self.error_mask, -np.inf, self.log_post)
        i, j = np.unravel_index(np.argmax(masked), masked.shape)
        return float(self.alphas[i]), float(self.betas[j])


def grid_log_posterior(system: SpatialSystem, y, hyper: HyperParams, n: int = 100,
                       lo: float = 0.0, hi: float = 2.0, threads: int = 1) -> GridResult:
    """Log theta-marginal in the noise-free limit, x pinned to log y.

    Cell (i, j) holds log prior - gamma V(log y) - log z_saddle at
    (alphas[i], betas[j]). Cells whose saddle-point evaluation fails are
    set to NaN and flagged in ``error_mask``.
    """
    x = np.log(np.asarray(y, dtype=float))
    alphas = grid_axis(n, lo, hi)
    betas = grid_axis(n, lo, hi)
    log_prior = -2.0 * np.log(hi - lo)

    def cell(ij):
        i, j = ij
        theta = Theta(alphas[i], betas[j])
        try:
            log_z = saddle_point_log_z(system, theta, hyper)
        except (NumericalError, ConvergenceError) as exc:
            log.debug("grid cell (%d, %d) failed: %s", i, j, exc)
            return np.nan
        return log_prior - hyper.gamma * float(potential(system, theta, hyper, x)) - log_z

    cells = [(i, j) for i in range(n) for j in range(n)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            values = list(pool.map(cell, cells))
    else:
        values = [cell(c) for c in cells]
    log_post = np.array(values).reshape(n, n)
    return GridResult(alphas, betas, log_post, np.isnan(log_post))


# --- Russian roulette ------------------------------------------------------


@dataclass
class RouletteConfig:
    exponent: float = 1.1
    cap: int = 1000
    ais: AisConfig = field(default_factory=AisConfig)

    def __post_init__(self):
        if not self.exponent > 1:
            raise InvalidParameterError("stopping-tail exponent must exceed 1")
        if self.cap < 1:
            raise InvalidParameterError("stopping-time cap must be positive")


@dataclass
class RouletteEstimate:
    """Signed estimate S of 1/z stored as sign and log|S|."""

    sign: int
    log_abs: float
    stopping_time: int
    capped: bool
    n_ais: int

    @property
    def value(self) -> float:
        return self.sign * float(np.exp(self.log_abs))


def survival(k, exponent: float = 1.1):
    """Pr(T >= k) = k^-exponent for k >= 1."""
    return np.asarray(k, dtype=float) ** -exponent


def sample_stopping_time(rng: np.random.Generator, exponent: float = 1.1,
                         cap: int = 1000) -> tuple[int, bool]:
    """Inverse-CDF draw of T with Pr(T >= k) = k^-exponent, truncated at ``cap``."""
    u = 1.0 - rng.random()  # in (0, 1]
    t = np.floor(u ** (-1.0 / exponent))
    if t > cap:
        return cap, True
    return int(t), False


def roulette_combine(log_z_hats, exponent: float = 1.1) -> tuple[int, float]:
    """Randomly truncated increasing-averages series for 1/z.

    ``log_z_hats`` holds T+1 independent unbiased estimates of log z.
    V_i = (i+1) / sum_{k<=i} z_k and
    S = V_0 + sum_{i=1..T} (V_i - V_{i-1}) / Pr(T >= i).
    Returns ``(sign, log|S|)``. S is evaluated as a signed log-sum of
    log V_i with the telescoped weights 1/Pr(T >= i) - 1/Pr(T >= i+1).
    """
    lz = np.asarray(log_z_hats, dtype=float)
    i = np.arange(lz.size)
    log_v = np.log(i + 1) - np.logaddexp.accumulate(lz)
    inv_p = 1.0 / survival(np.maximum(i, 1), exponent)
    inv_p[0] = 1.0
    w = inv_p.copy()
    w[:-1] -= inv_p[1:]
    log_abs, sign = logsumexp(log_v, b=w, return_sign=True)
    if sign == 0 or not np.isfinite(log_abs):
        return 0, -np.inf
    return int(sign), float(log_abs)


def roulette_inv_z(system: SpatialSystem, theta: Theta, hyper: HyperParams,
                   cfg: RouletteConfig, rng: np.random.Generator) -> RouletteEstimate:
    """Unbiased signed estimate of 1/z(theta) from T+1 AIS runs."""
    t, capped = sample_stopping_time(rng, cfg.exponent, cfg.cap)
    if capped:
        log.warning("roulette stopping time hit cap %d at %s; estimate is truncated", cfg.cap, theta)
    res = ais_log_z(system, theta, hyper, cfg.ais, rng, n_runs=t + 1)
    sign, log_abs = roulette_combine(res.log_z, cfg.exponent)
    return RouletteEstimate(sign, log_abs, t, capped, t + 1)


# --- Chains ----------------------------------------------------------------


@dataclass
class ChainConfig:
    n_iters: int = 20_000
    n_burn: int = 2_000
    theta0: tuple[float, float] | None = None
    theta_step: float = 0.05
    prior_lo: float = 0.0
    prior_hi: float = 2.0
    n_leapfrog: int = 10
    x_step: float | None = None
    theta_accept_target: float = 0.35
    x_accept_target: float = 0.93
    adapt_every: int = 50

    def __post_init__(self):
        if self.n_iters < 1 or self.n_burn < 0:
            raise InvalidParameterError("chain lengths must be positive")
        if not self.prior_hi > self.prior_lo >= 0:
            raise InvalidParameterError("prior box must satisfy 0 <= lo < hi")
        if not self.theta_step > 0:
            raise InvalidParameterError("theta_step must be positive")


@dataclass
class ChainSample:
    x: np.ndarray
    theta: Theta
    omega: int
    log_s_abs: float
    iteration: int


@dataclass
class Chain:
    """Post-burn-in states of a Metropolis-within-Gibbs run."""

    x: np.ndarray
    theta: np.ndarray
    omega: np.ndarray
    log_s_abs: np.ndarray
    theta_acceptance: float
    x_acceptance: float
    n_failed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.omega)

    def __getitem__(self, i) -> ChainSample:
        return ChainSample(self.x[i], Theta(*self.theta[i]), int(self.omega[i]),
                           float(self.log_s_abs[i]), i)

    @property
    def alpha(self) -> np.ndarray:
        return self.theta[:, 0]

    @property
    def beta(self) -> np.ndarray:
        return self.theta[:, 1]

    def to_csv(self, header: dict | None = None) -> str:
        buf = io.StringIO()
        buf.write(json.dumps(header or self.meta, sort_keys=True, default=_json_default) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        m = self.x.shape[1]
        writer.writerow(["iter", "alpha", "beta", "omega", "log_s_abs"] + [f"x_{j + 1}" for j in range(m)])
        for i in range(len(self)):
            writer.writerow(
                [i, repr(float(self.theta[i, 0])), repr(float(self.theta[i, 1])), int(self.omega[i]),
                 repr(float(self.log_s_abs[i]))] + [repr(float(v)) for v in self.x[i]]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Chain":
        lines = text.splitlines()
        meta = json.loads(lines[0])
        rows = list(csv.reader(lines[2:]))
        data = np.array([[float(v) for v in r] for r in rows]) if rows else np.empty((0, 6))
        return cls(
            x=data[:, 5:], theta=data[:, 1:3], omega=data[:, 3].astype(int),
            log_s_abs=data[:, 4],
            theta_acceptance=meta.get("theta_acceptance", np.nan),
            x_acceptance=meta.get("x_acceptance", np.nan),
            n_failed=meta.get("n_failed", 0), meta=meta,
        )


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


InvZ = Callable[[Theta, np.random.Generator], tuple[int, float]]


def gibbs_chain(system: SpatialSystem, y, hyper: HyperParams, inv_z: InvZ,
                cfg: ChainConfig, rng: np.random.Generator) -> Chain:
    """Alternate an HMC update of x with a reflected random-walk update of theta.

    ``inv_z(theta, rng)`` returns ``(sign, log|S|)`` for an estimate S of
    1/z(theta); it is called once per theta proposal and the value for the
    current theta is cached. Estimator failures reject the proposal.
    Proposal scales adapt during burn-in and are frozen afterwards. Halfway
    through burn-in the theta proposal becomes a correlated Gaussian shaped
    by the burn-in covariance; its folded density is not symmetric, so the
    acceptance ratio carries the Hastings correction.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (system.M,) or not np.all(y > 0):
        raise InvalidParameterError("observation must be a positive vector of length M")
    lo, hi = cfg.prior_lo, cfg.prior_hi
    theta = np.array(cfg.theta0 if cfg.theta0 is not None else ((lo + hi) / 2,) * 2, dtype=float)
    x = np.log(y)

    sign, log_s = inv_z(Theta(*theta), rng)
    if sign == 0:
        raise NumericalError(f"1/z estimate at the initial theta {theta} is zero")

    theta_scale = np.full(2, cfg.theta_step)
    x_step = cfg.x_step or 0.7 / np.sqrt(hyper.gamma * hyper.epsilon * hyper.kappa * hyper.K
                                         + 1.0 / hyper.lam ** 2)
    hmc = HmcConfig(x_step, cfg.n_leapfrog)

    n_total = cfg.n_burn + cfg.n_iters
    xs = np.empty((cfg.n_iters, system.M))
    thetas = np.empty((cfg.n_iters, 2))
    omegas = np.empty(cfg.n_iters, dtype=int)
    log_ss = np.empty(cfg.n_iters)
    burn_thetas = []
    late_log_steps = []
    win_theta = win_x = 0
    acc_theta = acc_x = 0
    n_failed = 0

    for it in range(n_total):
        th = Theta(*theta)

        def target(z, th=th):
            v, g = potential_and_grad(system, th, hyper, z)
            return (log_likelihood(y, z, hyper) - hyper.gamma * v,
                    grad_log_likelihood(y, z, hyper) - hyper.gamma * g)

        x, ok_x = hmc_step(x, target, hmc, rng)

        prop = rw_reflect_step(theta, theta_scale, lo, hi, rng)
        ok_theta = False
        if np.all(prop > 0):
            th_prop = Theta(*prop)
            try:
                sign_p, log_s_p = inv_z(th_prop, rng)
            except (NumericalError, ConvergenceError) as exc:
                log.info("rejecting theta=%s: %s", prop, exc)
                n_failed += 1
                sign_p = 0
            if sign_p != 0:
                log_ratio = (log_s_p - log_s
                             - hyper.gamma * (potential(system, th_prop, hyper, x)
                                              - potential(system, th, hyper, x)))
                if theta_scale.ndim == 2:
                    log_ratio += (reflect_log_q(theta, prop, theta_scale, lo, hi)
                                  - reflect_log_q(prop, theta, theta_scale, lo, hi))
                if np.log(rng.random()) < log_ratio:
                    theta, sign, log_s = prop, sign_p, log_s_p
                    ok_theta = True

        if it < cfg.n_burn:
            win_theta += ok_theta
            win_x += bool(ok_x)
            burn_thetas.append(theta.copy())
            if (it + 1) % cfg.adapt_every == 0:
                rate_t = win_theta / cfg.adapt_every
                theta_scale = adapt_step(theta_scale, rate_t, cfg.theta_accept_target, rate=1.0)
                hmc = HmcConfig(adapt_step(hmc.step_size, win_x / cfg.adapt_every,
                                           cfg.x_accept_target, rate=1.0), cfg.n_leapfrog)
                win_theta = win_x = 0
                if it + 1 > cfg.n_burn // 2:
                    late_log_steps.append(np.log(hmc.step_size))
            if it + 1 == cfg.n_burn and late_log_steps:
                # Freeze at the average of the late iterates; the last
                # window alone is noisy and biased low by the concave
                # acceptance curve.
                hmc = HmcConfig(float(np.exp(np.mean(late_log_steps))), cfg.n_leapfrog)
            if it + 1 == cfg.n_burn // 2 and cfg.n_burn >= 4 * cfg.adapt_every:
                cov = np.cov(np.array(burn_thetas[len(burn_thetas) // 2:]).T)
                try:
                    # Optimal random-walk scaling for a near-Gaussian target.
                    theta_scale = 2.38 / np.sqrt(2) * np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    log.info("burn-in theta covariance is singular; keeping diagonal scales")
            theta_scale = _clip_scale(theta_scale, 1e-3 * (hi - lo), hi - lo)
        else:
            k = it - cfg.n_burn
            acc_theta += ok_theta
            acc_x += bool(ok_x)
            xs[k], thetas[k], omegas[k], log_ss[k] = x, theta, sign, log_s

    meta = {
        "prior_lo": lo,
        "prior_hi": hi,
        "theta_scale": theta_scale.tolist(),
        "x_step": float(hmc.step_size),
        "n_burn": cfg.n_burn,
    }
    return Chain(xs, thetas, omegas, log_ss, acc_theta / cfg.n_iters, acc_x / cfg.n_iters,
                 n_failed, meta)


def _clip_scale(scale: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Clip per-coordinate proposal SDs to [lo, hi]; rows of a factor are rescaled."""
    if scale.ndim == 1:
        return np.clip(scale, lo, hi)
    sd = np.sqrt(np.sum(scale ** 2, axis=1))
    return scale * (np.clip(sd, lo, hi) / sd)[:, None]


def saddle_inv_z(system: SpatialSystem, hyper: HyperParams) -> InvZ:
    def inv_z(theta, rng):
        return 1, -saddle_point_log_z(system, theta, hyper)
    return inv_z


def roulette_inv_z_fn(system: SpatialSystem, hyper: HyperParams, cfg: RouletteConfig,
                      events: list | None = None) -> InvZ:
    def inv_z(theta, rng):
        est = roulette_inv_z(system, theta, hyper, cfg, rng)
        if events is not None:
            events.append((est.stopping_time, est.capped, est.sign))
        return est.sign, est.log_abs
    return inv_z


def saddle_gibbs_chain(system: SpatialSystem, y, hyper: HyperParams, n_iters: int,
                       cfg: ChainConfig | None = None, rng: np.random.Generator | None = None) -> Chain:
    """Gibbs sampler with z(theta) replaced by its saddle-point approximation."""
    cfg = _with_iters(cfg, n_iters)
    chain = gibbs_chain(system, y, hyper, saddle_inv_z(system, hyper), cfg,
                        rng or np.random.default_rng())
    chain.meta["method"] = "saddle"
    return chain


def pm_gibbs_chain(system: SpatialSystem, y, hyper: HyperParams, n_iters: int,
                   cfg: ChainConfig | None = None, rng: np.random.Generator | None = None,
                   roulette: RouletteConfig | None = None, inv_z: InvZ | None = None) -> Chain:
    """Sign-corrected pseudo-marginal Gibbs sampler.

    ``inv_z`` replaces the roulette estimator, e.g. with the exact 1/z.
    """
    cfg = _with_iters(cfg, n_iters)
    events: list = []
    if inv_z is None:
        inv_z = roulette_inv_z_fn(system, hyper, roulette or RouletteConfig(), events)
    chain = gibbs_chain(system, y, hyper, inv_z, cfg, rng or np.random.default_rng())
    chain.meta["method"] = "pm"
    if events:
        ts = np.array([e[0] for e in events])
        chain.meta["roulette"] = {
            "n_estimates": len(events),
            "mean_stopping_time": float(ts.mean()),
            "n_capped": int(sum(e[1] for e in events)),
            "negative_fraction": float(np.mean([e[2] < 0 for e in events])),
        }
    return chain


def _with_iters(cfg: ChainConfig | None, n_iters: int) -> ChainConfig:
    cfg = cfg or ChainConfig()
    if cfg.n_iters != n_iters:
        cfg = ChainConfig(**{**asdict(cfg), "n_iters": n_iters})
    return cfg


# --- Posterior summaries ---------------------------------------------------


def weighted_expectation(chain: Chain | np.ndarray, g) -> float | np.ndarray:
    """Sign-corrected estimate sum_i Omega_i g_i / sum_k Omega_k.

    ``chain`` is a ``Chain`` or a bare array of signs. ``g`` is an array of
    per-sample values (leading axis = samples) or a callable
    ``g(x, theta)`` applied to the chain arrays.
    """
    if isinstance(chain, Chain):
        omega = chain.omega
        values = g(chain.x, chain.theta) if callable(g) else g
    else:
        omega = np.asarray(chain)
        values = g
    values = np.asarray(values, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if values.shape[:1] != omega.shape:
        raise InvalidParameterError("one value per chain sample is required")
    total = omega.sum()
    if not total > 0:
        frac = float(np.mean(omega > 0)) if omega.size else float("nan")
        raise EstimatorUndefinedError(
            f"sign sum {total:g} is not positive (positive fraction {frac:.3f})"
        )
    return np.tensordot(omega, values, axes=1) / total


def silverman_bandwidth(samples, weights=None) -> float:
    x = np.asarray(samples, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    total = w.sum()
    mean = (w * x).sum() / total
    sd = np.sqrt(max((w * (x - mean) ** 2).sum() / total, 0.0))
    n_eff = total ** 2 / (w * w).sum()
    return 1.06 * sd * n_eff ** -0.2


def kde_marginal(samples, weights=None, grid=None, bandwidth: float | None = None):
    """Signed-weight Gaussian KDE, renormalised to unit trapezoid mass on ``grid``.

    Returns ``(grid, density)``. A degenerate sample (zero spread) falls
    back to a bandwidth of 1% of the grid span.
    """
    x = np.asarray(samples, dtype=float).reshape(-1)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if x.size < 1 or w.shape != x.shape:
        raise InvalidParameterError("samples and weights must be nonempty and of equal length")
    if grid is None:
        span = x.max() - x.min()
        pad = 0.25 * span if span > 0 else 1.0
        grid = np.linspace(x.min() - pad, x.max() + pad, 512)
    grid = np.asarray(grid, dtype=float)
    if bandwidth is None:
        bandwidth = silverman_bandwidth(x, w)
        if not bandwidth > 0:
            bandwidth = 0.01 * (grid[-1] - grid[0])
    if not bandwidth > 0:
        raise InvalidParameterError("bandwidth must be positive")
    # Bin-free exact sum, chunked over samples to bound memory.
    dens = np.zeros_like(grid)
    for start in range(0, x.size, 4096):
        u = (grid[:, None] - x[None, start:start + 4096]) / bandwidth
        dens += np.exp(-0.5 * u * u) @ w[start:start + 4096]
    mass = trapezoid(dens, grid)
    if not mass > 0:
        raise EstimatorUndefinedError("weighted KDE has nonpositive mass on the grid")
    return grid, dens / mass


def autocorrelation(series, max_lag: int = 50) -> np.ndarray | None:
    """Sample autocorrelation at lags 0..max_lag via FFT; None for a constant series."""
    x = np.asarray(series, dtype=float)
    x = x - x.mean()
    var = (x * x).sum()
    if x.size < 2 or var <= 1e-300 * max(x.size, 1):
        return None
    n = x.size
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[: min(max_lag, n - 1) + 1]
    return acov / acov[0]


def batch_means_se(values, omega=None, n_batches: int = 20) -> float:
    """Batch-means standard error of the (sign-weighted) mean of a chain."""
    v = np.asarray(values, dtype=float)
    w = np.ones_like(v) if omega is None else np.asarray(omega, dtype=float)
    size = v.size // n_batches
    if size < 1:
        raise InvalidParameterError("chain shorter than the number of batches")
    v, w = v[: size * n_batches], w[: size * n_batches]
    wb = w.reshape(n_batches, size).sum(axis=1)
    vb = (w * v).reshape(n_batches, size).sum(axis=1)
    if np.any(wb <= 0):
        raise EstimatorUndefinedError("a batch has a nonpositive sign sum")
    means = vb / wb
    return float(means.std(ddof=1) / np.sqrt(n_batches))


@dataclass
class PosteriorSummary:
    mean: dict
    sd: dict
    se: dict
    kde: dict
    positive_fraction: float
    autocorr: dict
    theta_acceptance: float
    x_acceptance: float
    flags: list

    def as_dict(self) -> dict:
        out = asdict(self)
        out["kde"] = {k: [g.tolist(), d.tolist()] for k, (g, d) in self.kde.items()}
        out["autocorr"] = {k: (None if v is None else v.tolist()) for k, v in self.autocorr.items()}
        return out


def diagnostics(chain: Chain, max_lag: int = 50, grid=None, theta_window=(0.3, 0.7),
                x_min: float = 0.9) -> PosteriorSummary:
    """Sign-corrected posterior summaries plus mixing and tuning diagnostics."""
    if len(chain) == 0:
        raise InvalidParameterError("chain is empty")
    flags = []
    omega = chain.omega
    pos = float(np.mean(omega > 0))
    mean, sd, se, kde, ac = {}, {}, {}, {}, {}
    grid = np.linspace(chain.meta.get("prior_lo", 0.0), chain.meta.get("prior_hi", 2.0), 401) \
        if grid is None else grid
    for k, name in enumerate(("alpha", "beta")):
        v = chain.theta[:, k]
        try:
            m = weighted_expectation(omega, v)
            mean[name] = float(m)
            sd[name] = float(np.sqrt(max(weighted_expectation(omega, (v - m) ** 2), 0.0)))
        except EstimatorUndefinedError as exc:
            flags.append(f"{name}: {exc}")
            mean[name] = sd[name] = float("nan")
        try:
            se[name] = batch_means_se(v, omega, n_batches=min(20, len(chain)))
        except (EstimatorUndefinedError, InvalidParameterError):
            se[name] = float("nan")
        try:
            kde[name] = kde_marginal(v, omega, grid)
        except (EstimatorUndefinedError, InvalidParameterError) as exc:
            flags.append(f"{name} kde: {exc}")
        ac[name] = autocorrelation(v, max_lag)
        if ac[name] is None:
            flags.append(f"{name}: constant chain, autocorrelation undefined")
        elif ac[name].size > 25 and ac[name][25] >= 0.2:
            flags.append(f"{name}: lag-25 autocorrelation {ac[name][25]:.3f} >= 0.2")
    lo, hi = theta_window
    if not lo <= chain.theta_acceptance <= hi:
        flags.append(f"theta acceptance {chain.theta_acceptance:.3f} outside [{lo}, {hi}]")
    if chain.x_acceptance < x_min:
        flags.append(f"x acceptance {chain.x_acceptance:.3f} below {x_min}")
    if pos <= 0.5:
        flags.append(f"positive sign fraction {pos:.3f} leaves the estimator unstable")
    return PosteriorSummary(mean, sd, se, kde, pos, ac, chain.theta_acceptance,
                            chain.x_acceptance, flags)
