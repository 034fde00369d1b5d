"""Mean and mean-square models of doubly-compressed diffusion LMS.

The analysis assumes ``A = I`` and a doubly stochastic gradient-combination
matrix ``C``. Block matrices are ``LN x LN`` with ``L x L`` blocks indexed by
node. Regressor covariances enter only through their means (the
small-step-size approximation ``E{R_i X R_i} ~ R X R``).

Notation used in variable names:

* ``qbar = M_grad / L`` and ``hbar = M / L`` are the mask means.
* ``W = Mu Sigma Mu`` with ``Mu = diag(mu_k I_L)``.
* For a mask with mean ``p`` the zero-mean fluctuation ``F = mask - p I`` has
  second moment ``E{F Y F} = c2 * I o Y + c1 * Y`` where ``(c1, c2)`` are the
  first two coefficients of :func:`alpha_coeffs` / :func:`beta_coeffs`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigs, gmres

from .topology import validate

DENSE_EIG_LIMIT = 2000
DENSE_SOLVE_LIMIT = 64  # LN at or below this: steady state by a dense solve
MAX_OPERATOR_DIM = 1000
STEADY_RTOL = 1e-8
STEADY_MAX_ITERS = 10**6


class TheoryError(ValueError):
    pass


def _selection_ratio(L: int, M: int) -> float:
    """``(M - 1) / (L - 1)``, taken as 1 when ``L == 1``."""
    return 1.0 if L == 1 else (M - 1) / (L - 1)


def _coeffs(L: int, M: int, name: str):
    if L < 1 or not 1 <= M <= L:
        raise TheoryError(f"need 1 <= {name} <= L, got {name}={M}, L={L}")
    if L == 1:
        return 0.0, 0.0, 1.0
    p = M / L
    r = _selection_ratio(L, M)
    return p * (r - p), p * (1.0 - r), p * p


def alpha_coeffs(L: int, M_grad: int):
    """Coefficients ``(a1, a2, a3)`` of ``E{Q Pi Q}`` for gradient masks."""
    return _coeffs(L, M_grad, "M_grad")


def beta_coeffs(L: int, M: int):
    """Coefficients ``(b1, b2, b3)`` of ``E{H Pi H}`` for estimate masks."""
    return _coeffs(L, M, "M")


def _pair_moment(Sigma, same_node, L, M, coeffs):
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.shape != (L, L):
        raise TheoryError(f"expected an {L}x{L} matrix, got {Sigma.shape}")
    c1, c2, c3 = coeffs(L, M)
    if same_node:
        return c2 * np.diag(np.diag(Sigma)) + (c1 + c3) * Sigma
    return c3 * Sigma


def pair_moment_Q(Sigma, same_node: bool, L: int, M_grad: int) -> np.ndarray:
    """``E{Q_l Sigma Q_k}`` for ``l == k`` (``same_node``) or independent masks."""
    return _pair_moment(Sigma, same_node, L, M_grad, alpha_coeffs)


def pair_moment_H(Sigma, same_node: bool, L: int, M: int) -> np.ndarray:
    return _pair_moment(Sigma, same_node, L, M, beta_coeffs)


def _block_masks(n_blocks: int, L: int):
    """``I_N (x) 1_LL`` and ``1_NN (x) I_L`` as boolean arrays."""
    in_block = np.kron(np.eye(n_blocks, dtype=bool), np.ones((L, L), dtype=bool))
    same_entry = np.kron(np.ones((n_blocks, n_blocks), dtype=bool), np.eye(L, dtype=bool))
    return in_block, same_entry


def _n_blocks(Pi, L):
    Pi = np.asarray(Pi, dtype=float)
    if Pi.ndim != 2 or Pi.shape[0] != Pi.shape[1] or Pi.shape[0] % L:
        raise TheoryError(f"matrix of shape {Pi.shape} is not square with {L}x{L} blocks")
    return Pi, Pi.shape[0] // L


def phi_Q(Pi, L: int, M_grad: int) -> np.ndarray:
    """Blockwise map ``[Pi]_kl -> E{Q_k [Pi]_kl Q_k}`` (one mask per block)."""
    Pi, n = _n_blocks(Pi, L)
    a1, a2, a3 = alpha_coeffs(L, M_grad)
    _, same_entry = _block_masks(n, L)
    return a2 * np.where(same_entry, Pi, 0.0) + (a1 + a3) * Pi


def phi_H(Pi, L: int, M: int) -> np.ndarray:
    Pi, n = _n_blocks(Pi, L)
    b1, b2, b3 = beta_coeffs(L, M)
    _, same_entry = _block_masks(n, L)
    return b2 * np.where(same_entry, Pi, 0.0) + (b1 + b3) * Pi


def _sandwich(Pi, L, c):
    Pi, n = _n_blocks(Pi, L)
    in_block, _ = _block_masks(n, L)
    return c[0] * np.where(in_block, Pi, 0.0) + c[1] * np.diag(np.diag(Pi)) + c[2] * Pi


def EQ_sandwich(Pi, L: int, M_grad: int) -> np.ndarray:
    """``E{Qcal Pi Qcal}`` with ``Qcal = diag(Q_1, ..., Q_N)`` independent masks."""
    return _sandwich(Pi, L, alpha_coeffs(L, M_grad))


def EH_sandwich(Pi, L: int, M: int) -> np.ndarray:
    return _sandwich(Pi, L, beta_coeffs(L, M))


@dataclass(frozen=True, eq=False)
class TheoryInputs:
    """Statistics needed by the models.

    Parameters
    ----------
    L, M, M_grad : int
        Vector length and the number of estimate / gradient entries shared.
    mu : array_like, shape (N,)
        Per-node step sizes.
    C : array_like, shape (N, N)
        Doubly stochastic gradient-combination matrix, ``C[l, k] = c_lk``.
    R_u : array_like, shape (N, L, L)
        Regressor covariances.
    sigma_v2 : array_like, shape (N,)
        Measurement-noise variances.
    """

    L: int
    M: int
    M_grad: int
    mu: np.ndarray
    C: np.ndarray
    R_u: np.ndarray
    sigma_v2: np.ndarray

    def __post_init__(self):
        C = np.array(self.C, dtype=float)
        N = C.shape[0]
        mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (N,)).copy()
        sv2 = np.broadcast_to(np.asarray(self.sigma_v2, dtype=float), (N,)).copy()
        R_u = np.array(self.R_u, dtype=float)
        if R_u.shape != (N, self.L, self.L):
            raise TheoryError(f"R_u must have shape {(N, self.L, self.L)}, got {R_u.shape}")
        alpha_coeffs(self.L, self.M_grad)
        beta_coeffs(self.L, self.M)
        diag = validate(C, stochasticity="doubly")
        if not diag.ok:
            raise TheoryError(
                f"C must be doubly stochastic (row dev {diag.max_row_deviation:.3g}, "
                f"col dev {diag.max_col_deviation:.3g}, min {diag.min_entry:.3g})")
        for k in range(N):
            if np.linalg.eigvalsh((R_u[k] + R_u[k].T) / 2).min() <= 0:
                raise TheoryError(f"R_u[{k}] is not positive definite")
        for name, val in (("mu", mu), ("C", C), ("R_u", R_u), ("sigma_v2", sv2)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def from_model(cls, model, C, mu, M, M_grad):
        return cls(model.dim, M, M_grad, mu, np.asarray(C), model.R_u, model.sigma_v2)

    @property
    def N(self) -> int:
        return self.C.shape[0]

    @property
    def qbar(self) -> float:
        return self.M_grad / self.L

    @property
    def hbar(self) -> float:
        return self.M / self.L

    @cached_property
    def Ccal(self) -> np.ndarray:
        return np.kron(self.C, np.eye(self.L))

    @cached_property
    def mu_diag(self) -> np.ndarray:
        """Diagonal of ``Mu`` as a length-``LN`` vector."""
        return np.repeat(self.mu, self.L)

    @cached_property
    def R_k(self) -> np.ndarray:
        """``R_k = sum_l c_lk R_u_l``, shape ``(N, L, L)``."""
        return np.einsum("lk,lij->kij", self.C, self.R_u)

    @cached_property
    def Rcal_u(self) -> np.ndarray:
        return _block_diag(self.R_u)

    @cached_property
    def Rcal(self) -> np.ndarray:
        return _block_diag(self.R_k)

    @cached_property
    def S(self) -> np.ndarray:
        return _block_diag(self.sigma_v2[:, None, None] * self.R_u)


def _block_diag(blocks) -> np.ndarray:
    n, L, _ = blocks.shape
    out = np.zeros((n * L, n * L))
    for k in range(n):
        out[k * L:(k + 1) * L, k * L:(k + 1) * L] = blocks[k]
    return out


def _spectral_radius(B) -> float:
    if B.shape[0] <= DENSE_EIG_LIMIT:
        return float(np.max(np.abs(np.linalg.eigvals(B))))
    vals = eigs(B, k=1, which="LM", return_eigenvectors=False)
    return float(np.abs(vals[0]))


@dataclass(frozen=True, eq=False)
class MeanModel:
    B: np.ndarray
    spectral_radius: float

    def propagate(self, w0_error, iterations) -> np.ndarray:
        """``E{w~_i} = B^i E{w~_0}`` for ``i = 0..iterations``, shape ``(iterations+1, LN)``."""
        out = np.empty((iterations + 1, self.B.shape[0]))
        out[0] = w0_error
        for i in range(iterations):
            out[i + 1] = self.B @ out[i]
        return out


def mean_matrix(inputs: TheoryInputs) -> MeanModel:
    """Expected error-propagation matrix ``B = E{B_i}``."""
    q, h = inputs.qbar, inputs.hbar
    Mu = inputs.mu_diag[:, None]
    s = np.repeat(inputs.C.sum(axis=0), inputs.L)[:, None]
    B = (np.eye(inputs.N * inputs.L)
         - h * q * Mu * inputs.Rcal
         - (1 - q) * Mu * s * inputs.Rcal_u
         - q * (1 - h) * Mu * (inputs.Ccal.T @ inputs.Rcal_u))
    return MeanModel(B, _spectral_radius(B))


def step_size_bound(inputs: TheoryInputs, k: int) -> float:
    """Step-size bound ``2 / lambda_max_k`` for node ``k``.

    ``lambda_max_k = hbar qbar lmax(R_k) + hbar (1 - qbar) lmax(R_u_k)
    + qbar (1 - hbar) max_l c_lk lmax(R_u_l)``.
    """
    q, h = inputs.qbar, inputs.hbar
    lam_u = np.array([np.linalg.eigvalsh(R).max() for R in inputs.R_u])
    lam_k = np.linalg.eigvalsh(inputs.R_k[k]).max()
    nbrs = inputs.C[:, k] > 0
    lam = h * q * lam_k + h * (1 - q) * lam_u[k] + q * (1 - h) * np.max(inputs.C[nbrs, k] * lam_u[nbrs])
    return float(2.0 / lam)


def step_size_bounds(inputs: TheoryInputs) -> np.ndarray:
    return np.array([step_size_bound(inputs, k) for k in range(inputs.N)])


def stable_step_scale(inputs: TheoryInputs, tol: float = 1e-6) -> float:
    """Largest common factor ``t`` such that ``mu = t * inputs.mu`` keeps ``rho(B) < 1``.

    Found by bisection on the spectral radius of the mean matrix; returns 0
    when even vanishing steps are unstable.
    """
    def rho(t):
        return mean_matrix(_with_mu(inputs, t * inputs.mu)).spectral_radius

    # rho(B) = 1 at t = 0; probe a small step to see if the mean is stable at all.
    lo = 1e-9
    if rho(lo) >= 1:
        return 0.0
    hi = 1.0
    while rho(hi) < 1:
        lo, hi = hi, hi * 2
        if hi > 1e12:
            return np.inf
    while hi - lo > tol * lo:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if rho(mid) < 1 else (lo, mid)
    return lo


def _with_mu(inputs, mu):
    return TheoryInputs(inputs.L, inputs.M, inputs.M_grad, mu, inputs.C, inputs.R_u, inputs.sigma_v2)


def _stacked_gram(A, B):
    """``sum_m A[m]^T B[m]`` as a single matrix product."""
    n = A.shape[-1]
    return A.reshape(-1, n).T @ B.reshape(-1, n)


@dataclass(frozen=True, eq=False)
class _Component:
    """One of the three random parts of ``X`` in ``B_i = I - Mu X``.

    ``X = mean + sum_m (I (x) Qf_m) Z[m] + Y * Hf + sum_m (I (x) Qf_m) V[m] * Hf``
    where ``Qf_m``/``Hf`` are mask fluctuations and ``* Hf`` right-multiplies
    block row ``k`` by the fluctuation of ``H_k``.
    """

    mean: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    V: np.ndarray


class VarianceOperator:
    """Linear map ``Sigma -> Sigma' = E{B_i^T Sigma B_i}`` and the noise functional.

    Valid for any symmetric weighting ``Sigma``, not only block-diagonal ones.
    """

    def __init__(self, inputs: TheoryInputs, max_dim: int = MAX_OPERATOR_DIM):
        n = inputs.N * inputs.L
        if n > max_dim:
            raise TheoryError(
                f"LN = {n} exceeds the variance-operator limit {max_dim}; "
                "the operator stores N dense LN x LN factors")
        self.inputs = inputs
        self.dim = n
        L, N = inputs.L, inputs.N
        self._in_block, self._same_entry = _block_masks(N, L)
        self._aQ = alpha_coeffs(L, inputs.M_grad)
        self._aH = beta_coeffs(L, inputs.M)
        self.components = self._build_components()
        tot = _Component(*(sum(getattr(c, f) for c in self.components) for f in ("mean", "Z", "Y", "V")))
        self.X = tot
        self._Gbar, self._ZG = self._noise_factors()

    # construction

    def _build_components(self):
        inp = self.inputs
        N, L = inp.N, inp.L
        q, h = inp.qbar, inp.hbar
        C, R_u, R_k = inp.C, inp.R_u, inp.R_k
        s = C.sum(axis=0)
        n = N * L

        def blk(A, k, l):
            return A[..., k * L:(k + 1) * L, l * L:(l + 1) * L]

        comps = []
        # X1: block (k,k) = sum_m c_mk Q_m R_u_m H_k
        mean, Z, Y, V = (np.zeros((n, n)), np.zeros((N, n, n)), np.zeros((n, n)), np.zeros((N, n, n)))
        for k in range(N):
            blk(mean, k, k)[...] = q * h * R_k[k]
            blk(Y, k, k)[...] = q * R_k[k]
            for m in range(N):
                blk(Z[m], k, k)[...] = h * C[m, k] * R_u[m]
                blk(V[m], k, k)[...] = C[m, k] * R_u[m]
        comps.append(_Component(mean, Z, Y, V))
        # X2: block (k,k) = sum_m c_mk (I - Q_m) R_u_k
        mean, Z = np.zeros((n, n)), np.zeros((N, n, n))
        for k in range(N):
            blk(mean, k, k)[...] = s[k] * (1 - q) * R_u[k]
            for m in range(N):
                blk(Z[m], k, k)[...] = -C[m, k] * R_u[k]
        comps.append(_Component(mean, Z, np.zeros((n, n)), np.zeros((N, n, n))))
        # X3: block (k,l) = c_lk Q_l R_u_l (I - H_k)
        mean, Z, Y, V = (np.zeros((n, n)), np.zeros((N, n, n)), np.zeros((n, n)), np.zeros((N, n, n)))
        for k in range(N):
            for m in range(N):
                if C[m, k] == 0:
                    continue
                blk(mean, k, m)[...] = q * (1 - h) * C[m, k] * R_u[m]
                blk(Y, k, m)[...] = -q * C[m, k] * R_u[m]
                blk(Z[m], k, m)[...] = (1 - h) * C[m, k] * R_u[m]
                blk(V[m], k, m)[...] = -C[m, k] * R_u[m]
        comps.append(_Component(mean, Z, Y, V))
        return comps

    def _noise_factors(self):
        inp = self.inputs
        N, L = inp.N, inp.L
        q = inp.qbar
        C, mu = inp.C, inp.mu
        s = C.sum(axis=0)
        Gbar = mu[:, None] * (q * C.T + (1 - q) * np.diag(s))
        ZG = np.zeros((N, N * L, N * L))
        for m in range(N):
            z = np.zeros((N, N))
            z[:, m] += mu * C[m, :]
            z[np.arange(N), np.arange(N)] -= mu * C[m, :]
            ZG[m] = np.kron(z, np.eye(L))
        return np.kron(Gbar, np.eye(L)), ZG

    # fluctuation moments

    def _fluct(self, Y, coeffs):
        """Blockwise ``E{F Y_kl F}`` for a zero-mean mask fluctuation ``F``."""
        c1, c2, _ = coeffs
        return c2 * np.where(self._same_entry, Y, 0.0) + c1 * Y

    def _bdiag(self, W):
        return np.where(self._in_block, W, 0.0)

    def _cross(self, a: _Component, b: _Component, W) -> np.ndarray:
        """``E{X_a^T W X_b}`` for components ``a`` and ``b``."""
        dQ = self._fluct(W, self._aQ)
        out = a.mean.T @ W @ b.mean
        out += _stacked_gram(a.Z, dQ @ b.Z)
        inner = a.Y.T @ self._bdiag(W) @ b.Y
        inner += _stacked_gram(a.V, self._bdiag(dQ) @ b.V)
        out += self._fluct(inner, self._aH)
        return out

    def _weight(self, Sigma):
        m = self.inputs.mu_diag
        return m[:, None] * Sigma * m[None, :]

    # public interface

    def first_order(self, Sigma) -> np.ndarray:
        """Terms of ``Sigma'`` linear in ``Mu``: ``Sigma - Xbar^T Mu Sigma - Sigma Mu Xbar``."""
        Sigma = np.asarray(Sigma, dtype=float)
        MX = self.inputs.mu_diag[:, None] * self.X.mean
        return Sigma - MX.T @ Sigma - Sigma @ MX

    def p_terms(self, Sigma) -> dict:
        """Second-order terms ``P1..P6`` as ``E{X_a^T W X_b}`` over component pairs."""
        W = self._weight(np.asarray(Sigma, dtype=float))
        X1, X2, X3 = self.components
        pairs = {"P1": (X1, X1), "P2": (X1, X2), "P3": (X1, X3),
                 "P4": (X2, X2), "P5": (X2, X3), "P6": (X3, X3)}
        return {k: self._cross(a, b, W) for k, (a, b) in pairs.items()}

    def __call__(self, Sigma) -> np.ndarray:
        Sigma = np.asarray(Sigma, dtype=float)
        W = self._weight(Sigma)
        return self.first_order(Sigma) + self._cross(self.X, self.X, W)

    def apply_by_terms(self, Sigma) -> np.ndarray:
        """Same map assembled from ``P1..P6`` and the transposes of ``P2, P3, P5``."""
        P = self.p_terms(Sigma)
        return (self.first_order(Sigma) + sum(P.values())
                + P["P2"].T + P["P3"].T + P["P5"].T)

    def noise_moment(self, Sigma) -> np.ndarray:
        """``E{G^T Sigma G}``."""
        Sigma = np.asarray(Sigma, dtype=float)
        G = self._Gbar
        out = G.T @ Sigma @ G
        inner = _stacked_gram(self._ZG, Sigma @ self._ZG)
        return out + self._fluct(inner, self._aQ)

    @cached_property
    def noise_kernel(self) -> np.ndarray:
        """``K`` with ``noise_term(Sigma) = sum(Sigma * K)``, i.e. ``E{G S G^T}^T``."""
        S = self.inputs.S
        G = self._Gbar
        K = G @ S @ G.T + _stacked_gram(np.swapaxes(self._ZG, 1, 2), self._fluct(S, self._aQ) @ np.swapaxes(self._ZG, 1, 2))
        return K.T

    def noise_term(self, Sigma) -> float:
        """``trace(E{G^T Sigma G} S)`` through the precomputed kernel."""
        return float(np.sum(np.asarray(Sigma, dtype=float) * self.noise_kernel))

    def noise_term_by_moment(self, Sigma) -> float:
        """Same value as :meth:`noise_term`, formed from :meth:`noise_moment`."""
        return float(np.sum(self.noise_moment(Sigma) * self.inputs.S.T))

    def theta_terms(self, Sigma):
        """``(Theta1, Theta2, Theta3)`` with ``E{G^T Sigma G} = Theta1 + Theta2 + Theta2^T + Theta3``."""
        inp = self.inputs
        L = inp.L
        q = inp.qbar
        C = inp.C
        s = C.sum(axis=0)
        W = self._weight(np.asarray(Sigma, dtype=float))
        theta1 = EQ_sandwich(inp.Ccal @ W @ inp.Ccal.T, L, inp.M_grad)
        Pi = inp.Ccal @ W
        theta2 = q * (1 - q) * Pi * np.repeat(s, L)[None, :] - np.kron(C, np.ones((L, L))) * self._fluct(Pi, self._aQ)
        CtC = np.kron(C.T @ C, np.ones((L, L)))
        ss = np.repeat(s, L)
        theta3 = (1 - q) ** 2 * ss[:, None] * W * ss[None, :] + CtC * self._fluct(W, self._aQ)
        return theta1, theta2, theta3

    def as_matrix(self) -> np.ndarray:
        """Materialize ``F`` acting on column-major ``vec(Sigma)``; only for tiny ``LN``."""
        n = self.dim
        F = np.empty((n * n, n * n))
        E = np.zeros((n, n))
        for j in range(n * n):
            c, r = divmod(j, n)
            E[r, c] = 1.0
            F[:, j] = self(E).reshape(-1, order="F")
            E[r, c] = 0.0
        return F

    def noise_vector(self) -> np.ndarray:
        """``g`` with ``noise_term(Sigma) = g . vec(Sigma)``."""
        n = self.dim
        g = np.empty(n * n)
        E = np.zeros((n, n))
        for j in range(n * n):
            c, r = divmod(j, n)
            E[r, c] = 1.0
            g[j] = self.noise_term(E)
            E[r, c] = 0.0
        return g


def variance_operator(inputs: TheoryInputs, max_dim: int = MAX_OPERATOR_DIM) -> VarianceOperator:
    return VarianceOperator(inputs, max_dim)


def diffusion_variance_operator(inputs: TheoryInputs):
    """Reference model for diffusion LMS with ``A = I`` (full sharing).

    Returns ``(F, noise)``: ``F(Sigma) = E{(I - Mu Rcal_i)^T Sigma (I - Mu Rcal_i)}``
    under the same small-step approximation, and the noise functional
    ``trace(C Mu Sigma Mu C^T S)``.
    """
    B = np.eye(inputs.N * inputs.L) - inputs.mu_diag[:, None] * inputs.Rcal
    CM = inputs.Ccal @ np.diag(inputs.mu_diag)

    def F(Sigma):
        return B.T @ Sigma @ B

    def noise(Sigma):
        return float(np.trace(CM @ Sigma @ CM.T @ inputs.S))

    return F, noise


def msd_weight(inputs: TheoryInputs, metric: str = "msd") -> np.ndarray:
    n = inputs.N * inputs.L
    if metric == "msd":
        return np.eye(n) / inputs.N
    if metric == "emse":
        return inputs.Rcal_u / inputs.N
    raise TheoryError(f"unknown metric {metric!r}; use 'msd' or 'emse'")


def _error0(inputs, w0_error):
    w0 = np.asarray(w0_error, dtype=float).reshape(-1)
    if w0.size == inputs.L:
        w0 = np.tile(w0, inputs.N)
    if w0.size != inputs.N * inputs.L:
        raise TheoryError(f"w0_error must have length L or LN, got {w0.size}")
    return w0


def predict_msd(inputs: TheoryInputs, iterations: int, w0_error, metric: str = "msd",
                operator: VarianceOperator | None = None) -> np.ndarray:
    """Network MSD (or EMSE) for ``i = 0..iterations``.

    ``w0_error`` is the initial error ``w_o - w_0``, either one length-``L``
    vector shared by all nodes or the stacked length-``LN`` vector.
    """
    op = operator or variance_operator(inputs)
    if mean_matrix(inputs).spectral_radius >= 1:
        warnings.warn("mean matrix has spectral radius >= 1; the prediction may diverge", RuntimeWarning)
    w0 = _error0(inputs, w0_error)
    Sigma = msd_weight(inputs, metric)
    out = np.empty(iterations + 1)
    acc = 0.0
    for i in range(iterations + 1):
        out[i] = w0 @ Sigma @ w0 + acc
        if i < iterations:
            acc += op.noise_term(Sigma)
            Sigma = op(Sigma)
    return out


@dataclass(frozen=True)
class SteadyState:
    value: float
    iterations: int
    converged: bool


def steady_state_by_iteration(inputs: TheoryInputs, metric: str = "msd", rtol: float = STEADY_RTOL,
                              max_iters: int = STEADY_MAX_ITERS,
                              operator: VarianceOperator | None = None) -> SteadyState:
    """Accumulate noise terms until the relative increment drops below ``rtol``.

    The limit does not depend on the initial error, so only the noise part of
    the recursion is tracked.
    """
    op = operator or variance_operator(inputs)
    Sigma = msd_weight(inputs, metric)
    acc = 0.0
    for i in range(1, max_iters + 1):
        inc = op.noise_term(Sigma)
        acc += inc
        Sigma = op(Sigma)
        if acc > 0 and abs(inc) / acc < rtol:
            return SteadyState(acc, i, True)
        if not np.isfinite(acc):
            break
    warnings.warn("steady-state accumulation did not converge", RuntimeWarning)
    return SteadyState(acc, i, False)


def steady_state_by_solve(inputs: TheoryInputs, metric: str = "msd",
                          operator: VarianceOperator | None = None) -> float:
    """Solve ``(I - F) sigma_inf = sigma_0`` and return ``noise(sigma_inf)``.

    Uses a dense solve on the materialized operator for small ``LN`` and
    GMRES on the matrix-free operator otherwise.
    """
    op = operator or variance_operator(inputs)
    n = op.dim
    s0 = msd_weight(inputs, metric).reshape(-1, order="F")
    if n <= DENSE_SOLVE_LIMIT:
        F = op.as_matrix()
        x = np.linalg.solve(np.eye(n * n) - F, s0)
    else:
        def matvec(v):
            S = v.reshape(n, n, order="F")
            return (S - op(S)).reshape(-1, order="F")

        A = LinearOperator((n * n, n * n), matvec=matvec, dtype=float)
        x, info = gmres(A, s0, rtol=1e-13, atol=0.0, restart=200, maxiter=200)
        if info != 0:
            raise TheoryError(f"GMRES did not converge (info={info})")
    return op.noise_term(x.reshape(n, n, order="F"))
