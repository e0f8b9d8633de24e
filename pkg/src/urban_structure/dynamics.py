"""Deterministic and stochastic Harris-Wilson dynamics.

The ODE is integrated in size space, dW/dt = eps W (D - kappa W + delta),
with classical RK4. The SDE is the overdamped Langevin equation in
log-size space, integrated by Euler-Maruyama.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InvalidParameterError, NumericalError, StepSizeError
from .model import HyperParams, SpatialSystem, Theta, dest_demand

_NOISE_BLOCK = 1 << 15


@dataclass
class IntegratorConfig:
    dt: float = 1e-2
    n_steps: int = 10_000
    stop_tol: float = 1e-8
    max_steps: int = 2_000_000
    save_every: int = 1
    burn_in_fraction: float = 0.1
    min_dt: float = 1e-12

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidParameterError("dt must be positive")
        if not self.stop_tol > 0:
            raise InvalidParameterError("stop_tol must be positive")
        if self.n_steps < 0 or self.max_steps < 1 or self.save_every < 1:
            raise InvalidParameterError("step counts must be positive")
        if not 0 <= self.burn_in_fraction < 1:
            raise InvalidParameterError("burn_in_fraction must lie in [0, 1)")


@dataclass
class Trajectory:
    """Saved states of an integration run, in log-size coordinates."""

    times: np.ndarray
    states: np.ndarray
    seed: int | None = None
    converged: bool = False
    burn_in: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def sizes(self) -> np.ndarray:
        return np.exp(self.states)

    def post_burn_in(self) -> np.ndarray:
        return self.states[self.burn_in:]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        m = self.states.shape[1]
        writer.writerow(["t"] + [f"x_{j + 1}" for j in range(m)])
        for t, row in zip(self.times, self.states):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])
        return buf.getvalue()


def kappa_from_K(origin_total: float, delta: float, M: int, K: float = 1.0) -> float:
    """Cost per unit size making the deterministic equilibrium total K."""
    if not K > 0:
        raise InvalidParameterError("K must be positive")
    return (origin_total + delta * M) / K


def _hw_rhs(system, theta, hyper, w):
    d = dest_demand(system, theta, np.log(w))
    return hyper.epsilon * w * (d - hyper.kappa * w + hyper.delta)


def equilibrium_residual(system: SpatialSystem, theta: Theta, hyper: HyperParams, w) -> np.ndarray:
    """kappa W_j - delta - D_j(W); zero at a stationary point of V."""
    w = np.asarray(w, dtype=float)
    return hyper.kappa * w - hyper.delta - dest_demand(system, theta, np.log(w))


def _rk4(system, theta, hyper, w, dt):
    k1 = _hw_rhs(system, theta, hyper, w)
    w2 = w + 0.5 * dt * k1
    if not np.all(w2 > 0):
        return None
    k2 = _hw_rhs(system, theta, hyper, w2)
    w3 = w + 0.5 * dt * k2
    if not np.all(w3 > 0):
        return None
    k3 = _hw_rhs(system, theta, hyper, w3)
    w4 = w + dt * k3
    if not np.all(w4 > 0):
        return None
    k4 = _hw_rhs(system, theta, hyper, w4)
    out = w + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not (np.all(np.isfinite(out)) and np.all(out > 0)):
        return None
    return out


def _relax(system, theta, hyper, w0, cfg, n_steps, converged_fn, record):
    """RK4 loop with step halving on nonpositive or nonfinite stages.

    After a halving the step is doubled back towards ``cfg.dt`` on each
    success. A stalled residual also halves the step, which catches
    oscillatory instability that never leaves the positive orthant.
    """
    w = np.array(w0, dtype=float)
    if w.shape != (system.M,):
        raise InvalidParameterError(f"initial sizes must have shape ({system.M},)")
    if not np.all(w > 0):
        raise InvalidParameterError("initial sizes must be strictly positive")
    dt = cfg.dt
    t = 0.0
    times, states = [0.0], [np.log(w)]
    best, since_best = np.inf, 0
    for step in range(1, n_steps + 1):
        while True:
            nxt = _rk4(system, theta, hyper, w, dt)
            if nxt is not None:
                break
            dt *= 0.5
            if dt < cfg.min_dt:
                raise StepSizeError(f"step size underflow at t={t:.6g}; instance is too stiff")
        w = nxt
        t += dt
        if dt < cfg.dt:
            dt = min(2 * dt, cfg.dt)
        done, score = converged_fn(w)
        if record and (step % cfg.save_every == 0 or done):
            times.append(t)
            states.append(np.log(w))
        if done:
            return w, t, step, True, times, states
        if score < best * (1 - 1e-3):
            best, since_best = score, 0
        else:
            since_best += 1
            if since_best > 2000:
                dt *= 0.5
                since_best = 0
                if dt < cfg.min_dt:
                    raise StepSizeError("step size underflow while relaxing")
    return w, t, n_steps, False, times, states


def simulate_ode(system: SpatialSystem, theta: Theta, hyper: HyperParams, w0, cfg: IntegratorConfig) -> Trajectory:
    """Integrate the deterministic dynamics for ``cfg.n_steps`` steps.

    Stops early once the sup-norm of dW/dt falls below ``cfg.stop_tol``.
    """

    def converged(w):
        rate = np.max(np.abs(_hw_rhs(system, theta, hyper, w)))
        return rate < cfg.stop_tol, rate

    w, t, steps, done, times, states = _relax(
        system, theta, hyper, w0, cfg, cfg.n_steps, converged, record=True
    )
    return Trajectory(np.array(times), np.array(states), None, done, 0, {"steps": steps})


def find_equilibrium(system: SpatialSystem, theta: Theta, hyper: HyperParams, w0,
                     cfg: IntegratorConfig | None = None) -> np.ndarray:
    """Relax the ODE from ``w0`` until the stationarity residual is small.

    The returned fixed point is the one whose basin contains ``w0``.
    """
    cfg = cfg or IntegratorConfig(dt=0.5)

    def converged(w):
        r = np.max(np.abs(equilibrium_residual(system, theta, hyper, w)))
        return r < cfg.stop_tol, r

    w, t, steps, done, _, _ = _relax(
        system, theta, hyper, w0, cfg, cfg.max_steps, converged, record=False
    )
    if not done:
        raise ConvergenceError(
            f"equilibrium residual above {cfg.stop_tol:g} after {steps} steps (t={t:.4g})"
        )
    return w


def simulate_sde(system: SpatialSystem, theta: Theta, hyper: HyperParams, x0,
                 cfg: IntegratorConfig, seed: int) -> Trajectory:
    """Euler-Maruyama for dX = -grad V dt + sqrt(2/gamma) dB.

    Gaussian increments come from a Philox counter-based generator keyed
    by ``seed`` and consumed in fixed order, so runs are reproducible and
    independent of the save stride.
    """
    x = np.array(x0, dtype=float)
    if x.shape != (system.M,) or not np.all(np.isfinite(x)):
        raise InvalidParameterError(f"x0 must be a finite vector of length {system.M}")
    dt = cfg.dt
    noise_scale = np.sqrt(2.0 * dt / hyper.gamma)
    gen = np.random.Generator(np.random.Philox(key=seed))

    # Inlined gradient: this loop runs ~1e6 times and numpy call overhead dominates.
    neg_bc = -theta.beta * system.cost
    alpha, origin = theta.alpha, system.origin
    eps, kappa, delta = hyper.epsilon, hyper.kappa, hyper.delta

    n = cfg.n_steps
    n_saved = n // cfg.save_every + 1
    times = np.empty(n_saved)
    states = np.empty((n_saved, system.M))
    times[0], states[0] = 0.0, x
    k_saved = 1
    noise = None
    for step in range(n):
        b = step % _NOISE_BLOCK
        if b == 0:
            size = min(_NOISE_BLOCK, n - step)
            noise = noise_scale * gen.standard_normal((size, system.M))
        u = alpha * x + neg_bc
        u -= u.max(axis=1, keepdims=True)
        np.exp(u, out=u)
        d = origin @ (u / u.sum(axis=1, keepdims=True))
        x = x - dt * eps * (kappa * np.exp(x) - delta - d) + noise[b]
        if (step + 1) % cfg.save_every == 0:
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"nonfinite state at step {step + 1}; reduce dt")
            times[k_saved] = (step + 1) * dt
            states[k_saved] = x
            k_saved += 1
    if not np.all(np.isfinite(x)):
        raise NumericalError("nonfinite state encountered; reduce dt")
    burn = int(cfg.burn_in_fraction * k_saved)
    return Trajectory(times[:k_saved], states[:k_saved], seed, False, burn)


def r_squared(system: SpatialSystem, theta: Theta, hyper: HyperParams, y,
              cfg: IntegratorConfig | None = None) -> float:
    """1 - Var(y - W_pred) / Var(y) with W_pred the equilibrium reached from y."""
    y = np.asarray(y, dtype=float)
    if not np.all(y > 0):
        raise InvalidParameterError("observed sizes must be positive")
    w_pred = find_equilibrium(system, theta, hyper, y, cfg)
    return 1.0 - np.var(y - w_pred) / np.var(y)
