"""Stochastic urban structure: Harris-Wilson dynamics, Boltzmann-Gibbs
sampling and Bayesian recovery of spatial interaction parameters."""

from .model import (
    HyperParams,
    SpatialSystem,
    Theta,
    dest_demand,
    flows,
    grad_potential,
    hessian_potential,
    laplacian_potential,
    log_likelihood,
    potential,
)

__version__ = "0.1.0"

__all__ = [
    "HyperParams",
    "SpatialSystem",
    "Theta",
    "dest_demand",
    "flows",
    "grad_potential",
    "hessian_potential",
    "laplacian_potential",
    "log_likelihood",
    "potential",
]
