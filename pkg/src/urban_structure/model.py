"""Problem instance, parameters and closed-form model mathematics.

All functions accept a single attractiveness vector ``x`` of shape ``(M,)``
or a batch of shape ``(..., M)``; leading dimensions broadcast through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidParameterError


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SpatialSystem:
    """Origin demands ``O`` (length N) and the N x M cost matrix ``C``.

    An all-zero origin vector is accepted; it describes the degenerate
    instance where only the cost and additional terms act.
    """

    origin: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        origin = _frozen(self.origin)
        cost = _frozen(self.cost)
        if origin.ndim != 1 or origin.size < 1:
            raise DimensionError("origin demands must be a nonempty vector")
        if cost.ndim != 2 or cost.shape[0] != origin.size or cost.shape[1] < 1:
            raise DimensionError(
                f"cost matrix shape {cost.shape} inconsistent with N={origin.size}"
            )
        if not (np.all(np.isfinite(origin)) and np.all(np.isfinite(cost))):
            raise InvalidParameterError("origin demands and costs must be finite")
        if np.any(origin < 0):
            raise InvalidParameterError("origin demands must be nonnegative")
        if np.any(cost < 0):
            raise InvalidParameterError("costs must be nonnegative")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "cost", cost)

    @property
    def N(self) -> int:
        return self.origin.size

    @property
    def M(self) -> int:
        return self.cost.shape[1]

    @property
    def total_origin(self) -> float:
        return float(self.origin.sum())


@dataclass(frozen=True)
class Theta:
    """Spatial interaction parameters: attractiveness and cost scaling."""

    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0:
                raise InvalidParameterError(f"{name} must be positive, got {v}")
            object.__setattr__(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta])


@dataclass(frozen=True)
class HyperParams:
    """Fixed scalars of the Boltzmann-Gibbs model.

    ``gamma`` may be ``inf`` to switch the stochastic dynamics off.
    """

    gamma: float
    delta: float
    kappa: float
    epsilon: float = 1.0
    lam: float = 0.1
    K: float = 1.0

    def __post_init__(self):
        for name in ("gamma", "delta", "kappa", "epsilon", "lam", "K"):
            v = float(getattr(self, name))
            if np.isnan(v) or v <= 0:
                raise InvalidParameterError(f"{name} must be positive, got {v}")
            object.__setattr__(self, name, v)

    def replace(self, **changes) -> "HyperParams":
        fields = dict(
            gamma=self.gamma, delta=self.delta, kappa=self.kappa,
            epsilon=self.epsilon, lam=self.lam, K=self.K,
        )
        fields.update(changes)
        return HyperParams(**fields)


def _check_x(system: SpatialSystem, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != system.M:
        raise DimensionError(
            f"attractiveness has trailing size {x.shape[-1:] or ()} but M={system.M}"
        )
    return x


def _utilities(system: SpatialSystem, theta: Theta, x: np.ndarray) -> np.ndarray:
    """alpha * x_j - beta * c_ij, shape (..., N, M)."""
    return theta.alpha * x[..., None, :] - theta.beta * system.cost


def _log_normalizers(u: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp over the last axis, max-shifted."""
    m = u.max(axis=-1, keepdims=True)
    return m[..., 0] + np.log(np.exp(u - m).sum(axis=-1))


def choice_probabilities(system: SpatialSystem, theta: Theta, x) -> np.ndarray:
    """Soft-max destination probabilities per origin (the Lambda matrix)."""
    x = _check_x(system, x)
    u = _utilities(system, theta, x)
    u = u - u.max(axis=-1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=-1, keepdims=True)


def flows(system: SpatialSystem, theta: Theta, x) -> np.ndarray:
    """Singly-constrained flow matrix T_ij; rows sum to O_i."""
    return system.origin[:, None] * choice_probabilities(system, theta, x)


def dest_demand(system: SpatialSystem, theta: Theta, x) -> np.ndarray:
    """Destination demands D_j = sum_i T_ij."""
    lam = choice_probabilities(system, theta, x)
    return np.einsum("i,...ij->...j", system.origin, lam)


def utility_potential(system: SpatialSystem, theta: Theta, x) -> np.ndarray:
    """-(1/alpha) sum_i O_i log sum_j exp(alpha x_j - beta c_ij)."""
    x = _check_x(system, x)
    lse = _log_normalizers(_utilities(system, theta, x))
    return -(lse @ system.origin) / theta.alpha


def potential(system: SpatialSystem, theta: Theta, hyper: HyperParams, x) -> np.ndarray:
    """Potential V(x) = eps * (utility + kappa * sum exp(x) - delta * sum x)."""
    x = _check_x(system, x)
    util = utility_potential(system, theta, x)
    # Far out in the confining tail V is +inf, which samplers treat as rejection.
    with np.errstate(over="ignore"):
        w = np.exp(x)
    return hyper.epsilon * (util + hyper.kappa * w.sum(axis=-1) - hyper.delta * x.sum(axis=-1))


def grad_potential(system: SpatialSystem, theta: Theta, hyper: HyperParams, x) -> np.ndarray:
    x = _check_x(system, x)
    d = dest_demand(system, theta, x)
    return hyper.epsilon * (-d + hyper.kappa * np.exp(x) - hyper.delta)


def potential_and_grad(system: SpatialSystem, theta: Theta, hyper: HyperParams, x):
    """V and its gradient from a single pass over the utility matrix."""
    x = _check_x(system, x)
    u = _utilities(system, theta, x)
    m = u.max(axis=-1, keepdims=True)
    e = np.exp(u - m)
    s = e.sum(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(s[..., 0])
    d = np.einsum("i,...ij->...j", system.origin, e / s)
    eps = hyper.epsilon
    with np.errstate(over="ignore"):
        w = np.exp(x)
        v = eps * (-(lse @ system.origin) / theta.alpha
                   + hyper.kappa * w.sum(axis=-1) - hyper.delta * x.sum(axis=-1))
        g = eps * (-d + hyper.kappa * w - hyper.delta)
    return v, g


def hessian_potential(system: SpatialSystem, theta: Theta, hyper: HyperParams, x) -> np.ndarray:
    """Dense Hessian of V, shape (..., M, M).

    H_jk = eps * (kappa e^{x_j} [j=k] - alpha * sum_i O_i L_ij ([j=k] - L_ik)).
    """
    x = _check_x(system, x)
    lam = choice_probabilities(system, theta, x)
    weighted = system.origin[:, None] * lam
    d = weighted.sum(axis=-2)
    outer = np.einsum("...ij,...ik->...jk", weighted, lam)
    diag = hyper.kappa * np.exp(x) - theta.alpha * d
    h = theta.alpha * outer
    idx = np.arange(system.M)
    h[..., idx, idx] += diag
    return hyper.epsilon * h


def laplacian_potential(system: SpatialSystem, theta: Theta, hyper: HyperParams, x) -> np.ndarray:
    """Trace of the Hessian in closed form."""
    x = _check_x(system, x)
    lam = choice_probabilities(system, theta, x)
    curv = np.einsum("i,...ij->...", system.origin, lam * (1.0 - lam))
    return hyper.epsilon * (hyper.kappa * np.exp(x).sum(axis=-1) - theta.alpha * curv)


def log_likelihood(y, x, hyper: HyperParams) -> np.ndarray:
    """Gaussian log-density of log(y) - x with covariance lam^2 I."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(~(y > 0)):
        raise InvalidParameterError("observed sizes must be strictly positive")
    x = np.asarray(x, dtype=np.float64)
    r = np.log(y) - x
    m = y.shape[-1]
    lam2 = hyper.lam ** 2
    return -0.5 * m * np.log(2 * np.pi * lam2) - 0.5 * (r * r).sum(axis=-1) / lam2


def grad_log_likelihood(y, x, hyper: HyperParams) -> np.ndarray:
    return (np.log(y) - np.asarray(x)) / hyper.lam ** 2
