"""Diffusion LMS over networks with compressed estimate and gradient exchange."""

from .algorithms import AlgorithmSpec, DivergenceError, MsdTrace, run, simulate
from .model import LinearModel, generate_model
from .topology import CombinationMatrix, NetworkTopology, metropolis_weights, uniform_weights

__all__ = [
    "AlgorithmSpec", "CombinationMatrix", "DivergenceError", "LinearModel", "MsdTrace", "NetworkTopology",
    "generate_model", "metropolis_weights", "run", "simulate", "uniform_weights",
]
__version__ = "0.1.0"
