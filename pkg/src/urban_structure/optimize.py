"""Minimisation of the potential and the saddle-point estimate of log z."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, NonPositiveDefiniteError
from .model import HyperParams, SpatialSystem, Theta, hessian_potential, potential_and_grad

_EPS = np.finfo(float).eps
# Consecutive non-decreasing steps before a row is treated as stalled at rounding level.
_MAX_FLAT = 10


@dataclass
class MinimizeResult:
    x_star: np.ndarray
    v_star: float
    grad_norm: float
    n_iters: int
    start_index: int = 0
    converged: bool = True
    history: list = field(default_factory=list, repr=False)


def _line_search(fun_grad, x, f, g, d, c1=1e-4, max_halvings=60):
    """Backtracking search on the sufficient-decrease condition.

    The unit step is refined once by the minimiser of the quadratic through
    f(0), f'(0) and f(1), which makes the search exact on quadratics.
    Returns ``None`` when no non-increasing step exists at working precision.
    """
    slope = g @ d
    t = 1.0
    f1, g1 = fun_grad(x + d)
    if np.isfinite(f1):
        curv = f1 - f - slope
        if curv > 0:
            t_star = -slope / (2 * curv)
            if 0.1 < t_star < 10 and abs(t_star - 1) > 1e-12:
                f2, g2 = fun_grad(x + t_star * d)
                if np.isfinite(f2) and f2 < f1:
                    t, f1, g1 = t_star, f2, g2
    for _ in range(max_halvings):
        if np.isfinite(f1):
            if f1 <= f + c1 * t * slope:
                return t, f1, g1
            # Near a minimum the decrease falls below rounding of f; accept
            # any non-increasing step that still shrinks the gradient.
            if f1 <= f and np.max(np.abs(g1)) < np.max(np.abs(g)):
                return t, f1, g1
        t *= 0.5
        f1, g1 = fun_grad(x + t * d)
    return None


def lbfgs(fun_grad, x0, tol=1e-8, max_iter=2000, memory=10, hess=None) -> MinimizeResult:
    """Limited-memory BFGS with backtracking line search.

    ``fun_grad(x)`` returns ``(f, grad)``. Convergence is declared when the
    sup-norm of the gradient drops below ``tol``. If the line search stalls
    at rounding level and ``hess`` is given, Newton steps finish the job.
    Every accepted step leaves f non-increasing.
    """
    x = np.array(x0, dtype=float)
    f, g = fun_grad(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise ValueError("objective is not finite at the starting point")
    pairs: deque = deque(maxlen=memory)
    history = [f]
    flat_run = 0
    for it in range(max_iter + 1):
        gnorm = np.max(np.abs(g))
        if gnorm < tol:
            return MinimizeResult(x, f, gnorm, it, history=history)
        if it == max_iter:
            break
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if pairs:
            s, y, _ = pairs[-1]
            q *= (s @ y) / (y @ y)
        else:
            q *= min(1.0, 1.0 / gnorm)
        for (s, y, rho), a in zip(pairs, reversed(alphas)):
            b = rho * (y @ q)
            q += s * (a - b)
        d = -q
        if g @ d >= 0:
            pairs.clear()
            d = -g * min(1.0, 1.0 / gnorm)
        found = _line_search(fun_grad, x, f, g, d)
        if found is not None:
            flat_run = flat_run + 1 if found[1] >= f else 0
        if found is None or flat_run >= _MAX_FLAT:
            if hess is not None:
                return _newton_polish(fun_grad, hess, x, f, g, tol, it, history)
            break
        t, f_new, g_new = found
        s = t * d
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x + s, f_new, g_new
        history.append(f)
    gnorm = np.max(np.abs(g))
    return MinimizeResult(x, f, gnorm, it, converged=gnorm < tol, history=history)


def lbfgs_batch(fun_grad, x0, tol=1e-8, max_iter=2000, memory=10, hess=None) -> list[MinimizeResult]:
    """``lbfgs`` run in lockstep on the rows of ``x0``.

    ``fun_grad`` must accept a ``(k, M)`` array and return ``(f, grad)`` of
    shapes ``(k,)`` and ``(k, M)``. Each row keeps its own curvature
    memory and line search, so results match independent runs; batching
    only amortises evaluation overhead. ``hess(x)`` takes a single point.
    """
    x = np.array(x0, dtype=float)
    n, m = x.shape
    f, g = fun_grad(x)
    f = np.array(f, dtype=float)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise ValueError("objective is not finite at a starting point")
    s_mem = np.zeros((n, memory, m))
    y_mem = np.zeros((n, memory, m))
    rho = np.zeros((n, memory))
    histories = [[fi] for fi in f]
    n_iters = np.zeros(n, dtype=int)
    flat_run = np.zeros(n, dtype=int)
    results: list = [None] * n
    active = np.ones(n, dtype=bool)

    for it in range(max_iter + 1):
        gnorm = np.max(np.abs(g), axis=1)
        for i in np.flatnonzero(active & (gnorm < tol)):
            results[i] = MinimizeResult(x[i].copy(), f[i], gnorm[i], it, history=histories[i])
            active[i] = False
        if not active.any() or it == max_iter:
            break
        idx = np.flatnonzero(active)
        q = g[idx].copy()
        # Unused or cleared slots hold rho = 0 and contribute nothing.
        s_a, y_a, rho_a = s_mem[idx], y_mem[idx], rho[idx]
        # Slots fill from the end, so leading all-empty slots can be skipped.
        first = memory - min(it, memory)
        alphas = np.zeros((idx.size, memory))
        for k in range(memory - 1, first - 1, -1):
            a = rho_a[:, k] * np.einsum("ij,ij->i", s_a[:, k], q)
            alphas[:, k] = a
            q -= a[:, None] * y_a[:, k]
        has = rho_a[:, -1] > 0
        yy = np.einsum("ij,ij->i", y_a[:, -1], y_a[:, -1])
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(has, 1.0 / (rho_a[:, -1] * yy), np.minimum(1.0, 1.0 / gnorm[idx]))
        q *= scale[:, None]
        for k in range(first, memory):
            b = rho_a[:, k] * np.einsum("ij,ij->i", y_a[:, k], q)
            q += s_a[:, k] * (alphas[:, k] - b)[:, None]
        d = -q
        uphill = np.einsum("ij,ij->i", g[idx], d) >= 0
        if uphill.any():
            j = idx[uphill]
            rho[j] = 0.0
            d[uphill] = -g[j] * np.minimum(1.0, 1.0 / gnorm[j])[:, None]

        t, f_new, g_new, ok = _line_search_batch(fun_grad, x[idx], f[idx], g[idx], d)
        flat_run[idx] = np.where(ok & (f_new >= f[idx]), flat_run[idx] + 1, 0)
        stalled = ~ok | (flat_run[idx] >= _MAX_FLAT)
        ok &= ~stalled
        for pos in np.flatnonzero(stalled):
            i = idx[pos]
            active[i] = False
            if hess is not None:
                single = lambda z: tuple(np.asarray(v)[0] for v in fun_grad(z[None]))
                results[i] = _newton_polish(single, hess, x[i], f[i], g[i], tol, it, histories[i])
            else:
                results[i] = MinimizeResult(x[i].copy(), f[i], gnorm[i], it,
                                            converged=gnorm[i] < tol, history=histories[i])
        if not ok.any():
            continue
        j = idx[ok]
        step = t[ok, None] * d[ok]
        dy = g_new[ok] - g[j]
        sy = np.einsum("ij,ij->i", step, dy)
        good = sy > 1e-12 * np.sqrt(np.einsum("ij,ij->i", step, step) * np.einsum("ij,ij->i", dy, dy))
        k = j[good]
        s_mem[k, :-1] = s_mem[k, 1:]
        y_mem[k, :-1] = y_mem[k, 1:]
        rho[k, :-1] = rho[k, 1:]
        s_mem[k, -1], y_mem[k, -1], rho[k, -1] = step[good], dy[good], 1.0 / sy[good]
        x[j] += step
        f[j], g[j] = f_new[ok], g_new[ok]
        n_iters[j] = it + 1
        for i, fi in zip(j, f[j]):
            histories[i].append(fi)

    gnorm = np.max(np.abs(g), axis=1)
    for i in range(n):
        if results[i] is None:
            results[i] = MinimizeResult(x[i].copy(), f[i], gnorm[i], n_iters[i],
                                        converged=gnorm[i] < tol, history=histories[i])
    return results


def _line_search_batch(fun_grad, x, f, g, d, c1=1e-4, max_halvings=60):
    """Row-wise ``_line_search``; returns step, new values and a success mask."""
    n = x.shape[0]
    slope = np.einsum("ij,ij->i", g, d)
    t = np.ones(n)
    f1, g1 = fun_grad(x + d)
    f1 = np.array(f1, dtype=float)
    g1 = np.array(g1, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        curv = f1 - f - slope
        t_star = -slope / (2 * curv)
    refine = np.isfinite(f1) & (curv > 0) & (t_star > 0.1) & (t_star < 10) & (np.abs(t_star - 1) > 1e-12)
    if refine.any():
        r = np.flatnonzero(refine)
        f2, g2 = fun_grad(x[r] + t_star[r, None] * d[r])
        better = np.isfinite(f2) & (f2 < f1[r])
        rb = r[better]
        t[rb], f1[rb], g1[rb] = t_star[rb], np.asarray(f2)[better], np.asarray(g2)[better]
    ok = np.zeros(n, dtype=bool)
    pending = np.arange(n)
    gmax = np.max(np.abs(g), axis=1)
    for _ in range(max_halvings):
        fp = f1[pending]
        with np.errstate(invalid="ignore"):
            armijo = fp <= f[pending] + c1 * t[pending] * slope[pending]
            flat = (fp <= f[pending]) & (np.max(np.abs(g1[pending]), axis=1) < gmax[pending])
        done = np.isfinite(fp) & (armijo | flat)
        ok[pending[done]] = True
        pending = pending[~done]
        if pending.size == 0:
            break
        t[pending] *= 0.5
        fp, gp = fun_grad(x[pending] + t[pending, None] * d[pending])
        f1[pending], g1[pending] = fp, gp
    return t, f1, g1, ok


def _newton_polish(fun_grad, hess, x, f, g, tol, it, history, max_steps=20):
    for k in range(max_steps):
        gnorm = np.max(np.abs(g))
        if gnorm < tol:
            return MinimizeResult(x, f, gnorm, it + k, history=history)
        try:
            step = np.linalg.solve(hess(x), -g)
        except np.linalg.LinAlgError:
            break
        f_new, g_new = fun_grad(x + step)
        if not (f_new <= f + 4 * _EPS * abs(f) and np.max(np.abs(g_new)) < gnorm):
            break
        x, f, g = x + step, min(f, f_new), g_new
        history.append(f)
    gnorm = np.max(np.abs(g))
    return MinimizeResult(x, f, gnorm, it, converged=gnorm < tol, history=history)


def local_minimize(system: SpatialSystem, theta: Theta, hyper: HyperParams, x0,
                   tol: float = 1e-8, max_iter: int = 2000) -> MinimizeResult:
    """Quasi-Newton descent of V from ``x0`` to a stationary point."""

    def fun_grad(x):
        return potential_and_grad(system, theta, hyper, x)

    def hess(x):
        return hessian_potential(system, theta, hyper, x)

    res = lbfgs(fun_grad, x0, tol=tol, max_iter=max_iter, hess=hess)
    res.v_star = float(res.v_star)
    if not res.converged:
        raise ConvergenceError(
            f"gradient norm {res.grad_norm:.3g} above {tol:g} after {res.n_iters} iterations"
        )
    return res


def multistart_points(M: int, K: float = 1.0) -> np.ndarray:
    """Uniform configuration plus one start per zone holding 90% of K."""
    starts = [np.full(M, np.log(K / M))]
    if M > 1:
        for j in range(M):
            x = np.full(M, np.log(0.1 * K / (M - 1)))
            x[j] = np.log(0.9 * K)
            starts.append(x)
    return np.array(starts)


def local_minima(system: SpatialSystem, theta: Theta, hyper: HyperParams,
                 tol: float = 1e-8) -> list[MinimizeResult]:
    """Minimise from every multistart point; starts that fail are skipped.

    The starts are run in lockstep through ``lbfgs_batch``.
    """

    def fun_grad(x):
        return potential_and_grad(system, theta, hyper, x)

    def hess(x):
        return hessian_potential(system, theta, hyper, x)

    out = []
    starts = multistart_points(system.M, hyper.K)
    for k, res in enumerate(lbfgs_batch(fun_grad, starts, tol=tol, hess=hess)):
        if res.converged:
            res.start_index = k
            res.v_star = float(res.v_star)
            out.append(res)
    return out


def global_minimum(system: SpatialSystem, theta: Theta, hyper: HyperParams,
                   tol: float = 1e-8) -> MinimizeResult:
    """Lowest local minimum over the multistart set; ties go to the earlier start."""
    results = local_minima(system, theta, hyper, tol=tol)
    if not results:
        raise ConvergenceError("local minimisation failed from every starting point")
    return min(results, key=lambda r: (r.v_star, r.start_index))


def log_det_spd(h: np.ndarray, floor: float = 1e-12) -> float:
    """log det of a symmetric positive-definite matrix via Cholesky.

    Raises when the smallest eigenvalue is below ``floor`` times the largest.
    """
    eig = np.linalg.eigvalsh(h)
    if eig[0] <= floor * max(eig[-1], 0.0) or eig[-1] <= 0:
        raise NonPositiveDefiniteError(
            f"Hessian not positive definite (eigenvalues {eig[0]:.3g} .. {eig[-1]:.3g})"
        )
    chol = np.linalg.cholesky(h)
    return 2.0 * np.log(np.diag(chol)).sum()


def laplace_log_z(v_min: float, hess: np.ndarray, gamma: float) -> float:
    """log of the Gaussian integral of exp(-gamma V) about a minimum."""
    m = hess.shape[0]
    return -gamma * v_min + 0.5 * m * np.log(2 * np.pi / gamma) - 0.5 * log_det_spd(hess)


def saddle_point_log_z(system: SpatialSystem, theta: Theta, hyper: HyperParams,
                       minimum: MinimizeResult | None = None) -> float:
    """Saddle-point (Laplace) approximation of log z(theta) at the global minimum."""
    minimum = minimum or global_minimum(system, theta, hyper)
    h = hessian_potential(system, theta, hyper, minimum.x_star)
    return laplace_log_z(minimum.v_star, h, hyper.gamma)
