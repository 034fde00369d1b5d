"""Linear regression data model shared by every agent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import streams

DEFAULT_SIGMA_U_RANGE = (0.8, 1.2)


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Ground truth ``w_true`` with per-node regressor and noise levels.

    Regressors at node ``k`` are zero-mean Gaussian with covariance
    ``sigma_u[k]**2 * I``; measurement noise has variance ``sigma_v[k]**2``.
    """

    w_true: np.ndarray
    sigma_u: np.ndarray
    sigma_v: np.ndarray

    def __post_init__(self):
        w = np.array(self.w_true, dtype=float).reshape(-1)
        su = np.array(self.sigma_u, dtype=float).reshape(-1)
        sv = np.array(self.sigma_v, dtype=float).reshape(-1)
        if w.size < 1:
            raise ValueError("w_true must have at least one entry")
        if su.shape != sv.shape or su.size < 1:
            raise ValueError(f"sigma_u and sigma_v need equal length >= 1, got {su.size} and {sv.size}")
        if np.any(su <= 0):
            raise ValueError("sigma_u must be positive")
        if np.any(sv < 0):
            raise ValueError("sigma_v must be nonnegative")
        for name, arr in (("w_true", w), ("sigma_u", su), ("sigma_v", sv)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.w_true.size

    @property
    def n_nodes(self) -> int:
        return self.sigma_u.size

    @property
    def R_u(self) -> np.ndarray:
        """Regressor covariances stacked as ``(N, L, L)``."""
        return self.sigma_u[:, None, None] ** 2 * np.eye(self.dim)

    @property
    def sigma_v2(self) -> np.ndarray:
        return self.sigma_v**2

    def permuted(self, perm) -> "LinearModel":
        perm = np.asarray(perm)
        return LinearModel(self.w_true, self.sigma_u[perm], self.sigma_v[perm])


@dataclass(frozen=True)
class Observation:
    regressor: np.ndarray
    reference: float


def _per_node(value, N, name):
    arr = np.broadcast_to(np.asarray(value, dtype=float), (N,)).copy()
    if arr.shape != (N,):
        raise ValueError(f"{name} must be a scalar or have length {N}")
    return arr


def generate_model(L: int, N: int, sigma_u=None, sigma_v=np.sqrt(1e-3), seed: int = 0,
                   sigma_u_range=DEFAULT_SIGMA_U_RANGE, w_true=None) -> LinearModel:
    """Build a model with ``w_true ~ N(0, I_L)`` drawn from ``seed``.

    ``sigma_u=None`` draws each node's regressor standard deviation uniformly
    from ``sigma_u_range``.
    """
    if L < 1 or N < 1:
        raise ValueError(f"L and N must be positive, got L={L}, N={N}")
    if w_true is None:
        w_true = streams.stream(seed, streams.MODEL).standard_normal(L)
    elif np.size(w_true) != L:
        raise ValueError(f"w_true has length {np.size(w_true)}, expected {L}")
    if sigma_u is None:
        lo, hi = sigma_u_range
        sigma_u = streams.stream(seed, streams.SIGMA).uniform(lo, hi, N)
    return LinearModel(w_true, _per_node(sigma_u, N, "sigma_u"), _per_node(sigma_v, N, "sigma_v"))


def sample(model: LinearModel, k: int, rng) -> Observation:
    """One regressor/reference pair at node ``k``."""
    if not 0 <= k < model.n_nodes:
        raise IndexError(f"node {k} out of range for {model.n_nodes} nodes")
    u = model.sigma_u[k] * rng.standard_normal(model.dim)
    v = model.sigma_v[k] * rng.standard_normal()
    return Observation(u, float(u @ model.w_true + v))
