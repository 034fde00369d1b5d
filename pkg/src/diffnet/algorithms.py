"""Synchronous simulation of diffusion LMS and its communication-reduced variants.

States are batched as ``(N, L, B)`` arrays: ``N`` nodes with length-``L``
estimates for ``B`` independent Monte-Carlo runs, run index last so that
elementwise work runs over long contiguous axes. Neighborhoods are laid out in
padded slots with slot 0 always the node itself; reductions over neighbors
run slot by slot in a fixed order so results are reproducible bit for bit.

Every step function is a pure function of the current estimates and one
iteration's worth of random draws (:class:`Draws`), so two algorithms fed the
same draws can be compared exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import streams
from .masks import mask_from_keys
from .topology import CombinationMatrix, NetworkTopology, identity_weights, validate

KINDS = ("diffusion", "rcd", "partial", "cd", "dcd")
DIVERGENCE_LIMIT = 1e12
CHUNK_BUDGET = 2**21  # floats per drawn array per chunk


class SpecError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, runs, label: str = ""):
        self.iteration = iteration
        self.runs = list(runs)
        what = f"{label}: " if label else ""
        super().__init__(f"{what}estimates diverged at iteration {iteration} (runs {self.runs})")


@dataclass(frozen=True, eq=False)
class AlgorithmSpec:
    """Configuration of one algorithm.

    ``A`` combines estimates and ``C`` combines gradients; ``None`` means the
    identity. ``cd`` always uses ``A = I`` and full gradients, ``partial``
    and ``rcd`` always use ``C = I``.
    """

    kind: str
    step_sizes: np.ndarray | float
    A: CombinationMatrix | np.ndarray | None = None
    C: CombinationMatrix | np.ndarray | None = None
    M: int | None = None
    M_grad: int | None = None
    m_k: np.ndarray | int | None = None
    label: str | None = None

    @property
    def name(self) -> str:
        return self.label or self.kind

    def resolve(self, topology: NetworkTopology, L: int) -> "ResolvedSpec":
        return ResolvedSpec.build(self, topology, L)

    def compression_ratio(self, L: int, topology: NetworkTopology | None = None) -> Fraction:
        """Values sent per link by diffusion LMS (``2L``) over values sent by this algorithm."""
        kind = self.kind
        if kind == "diffusion":
            return Fraction(1)
        if kind == "cd":
            return Fraction(2 * L, _entries(self.M, L, "M") + L)
        if kind == "dcd":
            return Fraction(2 * L, _entries(self.M, L, "M") + _entries(self.M_grad, L, "M_grad"))
        if kind == "partial":
            return Fraction(2 * L, _entries(self.M, L, "M"))
        if kind == "rcd":
            if topology is None:
                raise SpecError("rcd compression ratio needs the topology")
            deg = topology.degree
            m = np.broadcast_to(np.asarray(self.m_k if self.m_k is not None else deg), deg.shape)
            return Fraction(2 * int(deg.sum()), int(m.sum()))
        raise SpecError(f"unknown algorithm kind {kind!r}")


def _entries(value, L, name):
    if value is None:
        return L
    if not 0 <= int(value) <= L:
        raise SpecError(f"{name} must be in [0, {L}], got {value}")
    return int(value)


def _matrix(w, N, name):
    if w is None:
        return identity_weights(N)
    if not isinstance(w, CombinationMatrix):
        w = CombinationMatrix(np.asarray(w, dtype=float), "doubly" if name == "C" else "left")
    if w.weights.shape != (N, N):
        raise SpecError(f"{name} has shape {w.weights.shape}, expected {(N, N)}")
    return w


@dataclass(frozen=True, eq=False)
class ResolvedSpec:
    """Spec turned into slot-indexed arrays for a fixed topology."""

    kind: str
    label: str
    L: int
    mu: np.ndarray  # (N,)
    A: np.ndarray
    C: np.ndarray
    M: int
    M_grad: int
    m_k: np.ndarray  # (N,)
    nbr: np.ndarray  # (N, S) neighbor index per slot, padded with self
    valid: np.ndarray  # (N, S)
    a_slot: np.ndarray  # (N, S) = A[nbr, k], zero on padding
    c_slot: np.ndarray
    a_active: tuple = field(default=())
    c_active: tuple = field(default=())

    @property
    def N(self) -> int:
        return self.nbr.shape[0]

    @property
    def n_slots(self) -> int:
        return self.nbr.shape[1]

    @classmethod
    def build(cls, spec: AlgorithmSpec, topology: NetworkTopology, L: int) -> "ResolvedSpec":
        if spec.kind not in KINDS:
            raise SpecError(f"unknown algorithm kind {spec.kind!r}; expected one of {KINDS}")
        N = topology.n_nodes
        mu = np.broadcast_to(np.asarray(spec.step_sizes, dtype=float), (N,)).copy()
        if np.any(mu <= 0) or not np.all(np.isfinite(mu)):
            raise SpecError("step sizes must be positive and finite")
        A = _matrix(spec.A, N, "A")
        C = _matrix(spec.C, N, "C")
        if spec.kind == "cd":
            A = identity_weights(N)
        if spec.kind in ("partial", "rcd"):
            C = identity_weights(N)
        for w, name, kind in ((A, "A", "left"), (C, "C", "right")):
            diag = validate(w, topology, kind)
            if not diag.ok:
                raise SpecError(
                    f"{name} is not a valid {kind}-stochastic matrix on this topology: "
                    f"row dev {diag.max_row_deviation:.3g}, col dev {diag.max_col_deviation:.3g}, "
                    f"min entry {diag.min_entry:.3g}, support violations {diag.support_violations[:5]}")
        M = _entries(spec.M, L, "M") if spec.kind in ("partial", "cd", "dcd") else L
        M_grad = _entries(spec.M_grad, L, "M_grad") if spec.kind == "dcd" else L
        if spec.kind in ("cd", "dcd") and M < 1:
            raise SpecError("M must be at least 1")
        if spec.kind == "dcd" and M_grad < 1:
            raise SpecError("M_grad must be at least 1")
        deg = topology.degree
        if spec.kind == "rcd":
            m_k = np.broadcast_to(np.asarray(spec.m_k if spec.m_k is not None else deg, dtype=int), (N,)).copy()
            if np.any(m_k < 0) or np.any(m_k > deg):
                bad = np.flatnonzero((m_k < 0) | (m_k > deg)).tolist()
                raise SpecError(f"m_k must lie in [0, |N_k| - 1]; violated at nodes {bad}")
        else:
            m_k = deg.copy()

        S = int(deg.max()) + 1
        nbr = np.repeat(np.arange(N)[:, None], S, axis=1)
        valid = np.zeros((N, S), dtype=bool)
        for k in range(N):
            others = topology.neighbors(k, include_self=False)
            nbr[k, 1:1 + others.size] = others
            valid[k, :1 + others.size] = True
        cols = np.arange(N)[:, None]
        a_slot = np.where(valid, np.asarray(A)[nbr, cols], 0.0)
        c_slot = np.where(valid, np.asarray(C)[nbr, cols], 0.0)
        return cls(
            kind=spec.kind, label=spec.name, L=L, mu=mu, A=np.asarray(A), C=np.asarray(C),
            M=M, M_grad=M_grad, m_k=m_k, nbr=nbr, valid=valid, a_slot=a_slot, c_slot=c_slot,
            a_active=tuple(int(s) for s in np.flatnonzero(np.any(a_slot != 0, axis=0))),
            c_active=tuple(int(s) for s in np.flatnonzero(np.any(c_slot != 0, axis=0))),
        )


@dataclass
class Draws:
    """Random quantities of one iteration for a batch of ``B`` runs.

    Arrays keep the run index last: regressors ``U`` and masks ``H``, ``Q``
    are ``(N, L, B)``, references ``D`` are ``(N, B)`` and the RCD neighbor
    selection ``select`` is ``(N, S, B)`` with slot 0 unused. Unused masks
    are all ones.
    """

    U: np.ndarray
    D: np.ndarray
    H: np.ndarray | None = None
    Q: np.ndarray | None = None
    select: np.ndarray | None = None


# step functions
#
# Estimates are ``(N, L, B)``. Gathering neighbors with ``x[nbr]`` gives
# ``(N, S, L, B)``; slot weights are ``(N, S, 1)`` or ``(N, S, B)``.

def _accumulate(terms, active, weights):
    """``sum_s weights[:, s] * terms[:, s]`` over ``active`` slots, in slot order."""
    acc = None
    for s in active:
        t = weights[:, s, None, :] * terms[:, s]
        acc = t if acc is None else acc + t
    return acc


def _adapt_full(W, dr: Draws, rs: ResolvedSpec, c_slot):
    """``psi_k = w_k + mu_k sum_l c_lk u_l (d_l - u_l^T w_k)``."""
    Ul = dr.U[rs.nbr]
    e = dr.D[rs.nbr] - (Ul * W[:, None]).sum(axis=2)
    return W + rs.mu[:, None, None] * _accumulate(Ul * e[:, :, None, :], rs.c_active, c_slot)


def _adapt_compressed(W, dr: Draws, rs: ResolvedSpec, c_slot):
    """Gradient exchange where neighbor ``l`` evaluates its gradient at the spliced
    point ``H_k w_k + (I - H_k) w_l`` and sends only the entries picked by ``Q_l``;
    node ``k`` fills the rest from its own gradient."""
    H = dr.H[:, None]
    local = dr.U * (dr.D - (dr.U * W).sum(axis=1))[:, None, :]
    Ul = dr.U[rs.nbr]
    x = H * W[:, None] + (1.0 - H) * W[rs.nbr]
    e = dr.D[rs.nbr] - (Ul * x).sum(axis=2)
    Ql = dr.Q[rs.nbr]
    g = Ql * (Ul * e[:, :, None, :]) + (1.0 - Ql) * local[:, None]
    return W + rs.mu[:, None, None] * _accumulate(g, rs.c_active, c_slot)


def _neighbor_terms(own, published, H, nbr):
    """Slot terms ``H_l y_l + (I - H_l) own_k`` with slot 0 holding ``own_k``."""
    Hl = H[nbr]
    t = Hl * published[nbr] + (1.0 - Hl) * own[:, None]
    t[:, 0] = own
    return t


def diffusion_step(W, dr: Draws, rs: ResolvedSpec, awake=None):
    """ATC diffusion LMS: ``psi = adapt(w)``, ``w_k = sum_l a_lk psi_l``."""
    c_slot, a_slot = _gated_weights(rs, awake)
    psi = _published(_adapt_full(W, dr, rs, c_slot), W, awake)
    return _keep_sleeping(_accumulate(psi[rs.nbr], rs.a_active, a_slot), W, awake)


def partial_step(W, dr: Draws, rs: ResolvedSpec, awake=None):
    """Neighbors share ``M`` entries of ``psi_l``; missing entries come from ``psi_k``."""
    c_slot, a_slot = _gated_weights(rs, awake)
    psi = _published(_adapt_full(W, dr, rs, c_slot), W, awake)
    terms = _neighbor_terms(psi, psi, dr.H, rs.nbr)
    return _keep_sleeping(_accumulate(terms, rs.a_active, a_slot), W, awake)


def rcd_step(W, dr: Draws, rs: ResolvedSpec, awake=None):
    """Each node combines with ``m_k`` randomly selected neighbors.

    Unselected neighbors' weights move to the node itself, so with every
    neighbor selected the weights are exactly those of ``A``.
    """
    c_slot, a_slot = _gated_weights(rs, awake)
    psi = _published(_adapt_full(W, dr, rs, c_slot), W, awake)
    sel = dr.select
    a_eff = a_slot * sel
    self_w = np.broadcast_to(a_slot[:, 0], sel[:, 0].shape).copy()
    for s in range(1, rs.n_slots):
        self_w += (1.0 - sel[:, s]) * a_slot[:, s]
    a_eff[:, 0] = self_w
    return _keep_sleeping(_accumulate(psi[rs.nbr], rs.a_active, a_eff), W, awake)


def dcd_step(W, dr: Draws, rs: ResolvedSpec, awake=None):
    """Doubly-compressed diffusion: masked gradients and masked previous estimates.

    ``w_k = a_kk psi_k + sum_{l != k} a_lk (H_l w_l + (I - H_l) psi_k)``.
    """
    c_slot, a_slot = _gated_weights(rs, awake)
    psi = _adapt_compressed(W, dr, rs, c_slot)
    terms = _neighbor_terms(psi, W, dr.H, rs.nbr)
    return _keep_sleeping(_accumulate(terms, rs.a_active, a_slot), W, awake)


def cd_step(W, dr: Draws, rs: ResolvedSpec, awake=None):
    """Compressed diffusion: :func:`dcd_step` with full gradients and ``A = I``."""
    if rs.M_grad != rs.L or rs.a_active != (0,):
        raise SpecError("cd requires M_grad = L and A = I")
    return dcd_step(W, dr, rs, awake)


STEPS = {"diffusion": diffusion_step, "rcd": rcd_step, "partial": partial_step, "cd": cd_step, "dcd": dcd_step}


def _gated_weights(rs: ResolvedSpec, awake):
    """Slot weights; sleeping neighbors' gradient weight moves to the node itself."""
    a = rs.a_slot[..., None]
    c = rs.c_slot[..., None]
    if awake is None:
        return c, a
    nb_awake = awake[rs.nbr].astype(float)  # (N, S, B)
    nb_awake[:, 0] = 1.0
    gated = c * nb_awake
    gated[:, 0] += (c * (1.0 - nb_awake)).sum(axis=1)
    return gated, a


def _published(psi, W, awake):
    """Sleeping nodes expose their last estimate instead of a fresh ``psi``."""
    if awake is None:
        return psi
    return np.where(awake[:, None, :], psi, W)


def _keep_sleeping(W_new, W, awake):
    if awake is None:
        return W_new
    return np.where(awake[:, None, :], W_new, W)


# random draws

class DrawSource:
    """Per-(run, node) random streams delivered in chunks of iterations.

    Chunking only changes how many values are pulled at a time; every stream
    is consumed sequentially, so results do not depend on the chunk size.
    """

    def __init__(self, rs: ResolvedSpec, model, seed: int, run_ids, node_keys=None, chunk: int | None = None):
        self.rs = rs
        self.model = model
        self.run_ids = list(run_ids)
        N, L = rs.N, rs.L
        self.node_keys = np.arange(N) if node_keys is None else np.asarray(node_keys)
        B = len(self.run_ids)
        self.chunk = chunk or max(1, min(1000, CHUNK_BUDGET // max(1, B * N * L)))
        kinds = [streams.REGRESSOR, streams.NOISE]
        self.need_H = rs.kind in ("partial", "cd", "dcd") and rs.M < L
        self.need_Q = rs.kind == "dcd" and rs.M_grad < L
        self.need_sel = rs.kind == "rcd"
        if self.need_H:
            kinds.append(streams.H_MASK)
        if self.need_Q:
            kinds.append(streams.Q_MASK)
        if self.need_sel:
            kinds.append(streams.NEIGHBOR_SELECT)
        self.gens = {
            kind: [[streams.node_stream(seed, r, int(self.node_keys[n]), kind) for r in self.run_ids]
                   for n in range(N)]
            for kind in kinds
        }
        self._buf = None
        self._pos = 0

    def _draw(self, kind, T, widths, fn, fill=0.0):
        """``(T, N, B, W)`` array; node ``n`` fills its first ``widths[n]`` columns."""
        B, N = len(self.run_ids), self.rs.N
        out = np.full((T, N, B, max(widths)), fill)
        for n in range(N):
            if widths[n]:
                for b in range(B):
                    out[:, n, b, :widths[n]] = fn(self.gens[kind][n][b], (T, widths[n]))
        return out

    def _refill(self):
        rs, model = self.rs, self.model
        T, L, N = self.chunk, rs.L, rs.N
        Ls = [L] * N

        def batch_last(x):
            return np.ascontiguousarray(np.moveaxis(x, 2, 3))

        U = batch_last(self._draw(streams.REGRESSOR, T, Ls, lambda g, s: g.standard_normal(s)))
        U *= model.sigma_u[None, :, None, None]
        v = self._draw(streams.NOISE, T, [1] * N, lambda g, s: g.standard_normal(s))[..., 0]
        D = (U * model.w_true[None, None, :, None]).sum(axis=2) + model.sigma_v[None, :, None] * v
        ones = np.ones((T, N, L, len(self.run_ids)))
        H = Q = ones
        if self.need_H:
            H = batch_last(mask_from_keys(self._draw(streams.H_MASK, T, Ls, lambda g, s: g.random(s)), rs.M))
        if self.need_Q:
            Q = batch_last(mask_from_keys(self._draw(streams.Q_MASK, T, Ls, lambda g, s: g.random(s)), rs.M_grad))
        sel = self._selection(T) if self.need_sel else None
        self._buf = (U, D, H, Q, sel)
        self._pos = 0

    def _selection(self, T):
        rs = self.rs
        deg = rs.valid.sum(axis=1) - 1
        keys = self._draw(streams.NEIGHBOR_SELECT, T, deg, lambda g, s: g.random(s), fill=np.inf)
        keys = keys[..., : rs.n_slots - 1]
        if keys.shape[-1] < rs.n_slots - 1:
            pad = np.full(keys.shape[:-1] + (rs.n_slots - 1 - keys.shape[-1],), np.inf)
            keys = np.concatenate([keys, pad], axis=-1)
        rank = np.argsort(np.argsort(keys, axis=-1, kind="stable"), axis=-1, kind="stable")
        sel = rank < rs.m_k[None, :, None, None]  # (T, N, B, S-1)
        out = np.zeros(sel.shape[:3] + (rs.n_slots,))
        out[..., 1:] = sel
        return np.ascontiguousarray(np.moveaxis(out, 2, 3))

    def next(self) -> Draws:
        if self._buf is None or self._pos == self.chunk:
            self._refill()
        p = self._pos
        self._pos += 1
        U, D, H, Q, sel = self._buf
        return Draws(U[p], D[p], H[p], Q[p], None if sel is None else sel[p])


# Monte-Carlo driver

@dataclass
class MsdTrace:
    """Network MSD per iteration, ``msd[i]`` after ``i`` iterations."""

    label: str
    msd: np.ndarray
    per_run: np.ndarray | None = None

    @property
    def msd_db(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(self.msd)

    @property
    def iterations(self) -> int:
        return self.msd.size - 1


def network_msd(W, w_true) -> np.ndarray:
    """``(1/N) sum_k ||w_o - w_k||^2`` per run for batch-last estimates ``(N, L, B)``.

    Sums run sequentially over entries then nodes, so each run's value does
    not depend on how many runs share the batch.
    """
    sq = (W - w_true[None, :, None]) ** 2
    per_node = sq[:, 0].copy()
    for j in range(1, sq.shape[1]):
        per_node += sq[:, j]
    total = per_node[0].copy()
    for k in range(1, sq.shape[0]):
        total += per_node[k]
    return total / sq.shape[0]


def simulate(spec: AlgorithmSpec | ResolvedSpec, model, topology: NetworkTopology, iterations: int,
             run_ids, seed: int, node_keys=None, record_states: bool = False, chunk: int | None = None):
    """Run a batch of Monte-Carlo runs in lockstep.

    Returns ``(msd, states)``: per-run MSD of shape ``(B, iterations + 1)`` and,
    if ``record_states``, every estimate as ``(iterations + 1, B, N, L)``.
    """
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    rs = spec if isinstance(spec, ResolvedSpec) else spec.resolve(topology, model.dim)
    if rs.N != model.n_nodes:
        raise SpecError(f"model has {model.n_nodes} nodes but the topology has {rs.N}")
    run_ids = list(run_ids)
    B = len(run_ids)
    step = STEPS[rs.kind]
    src = DrawSource(rs, model, seed, run_ids, node_keys, chunk)
    W = np.zeros((rs.N, rs.L, B))
    msd = np.empty((B, iterations + 1))
    msd[:, 0] = network_msd(W, model.w_true)
    states = np.empty((iterations + 1, B, rs.N, rs.L)) if record_states else None
    if record_states:
        states[0] = W.transpose(2, 0, 1)
    for i in range(1, iterations + 1):
        W = step(W, src.next(), rs)
        bad = ~np.isfinite(W) | (np.abs(W) > DIVERGENCE_LIMIT)
        if bad.any():
            runs = [run_ids[b] for b in np.flatnonzero(bad.any(axis=(0, 1)))]
            raise DivergenceError(i, runs, rs.label)
        msd[:, i] = network_msd(W, model.w_true)
        if record_states:
            states[i] = W.transpose(2, 0, 1)
    return msd, states


def run(spec: AlgorithmSpec, model, topology: NetworkTopology, iterations: int, runs: int, seed: int,
        batch_size: int = 50, executor=None, keep_runs: bool = False) -> MsdTrace:
    """Average network MSD over ``runs`` independent runs.

    Runs are split into batches of ``batch_size`` (optionally mapped over an
    ``executor``); the average is accumulated in run order, so the result
    does not depend on how batches are scheduled.
    """
    if iterations < 1 or runs < 1:
        raise ValueError("iterations and runs must be at least 1")
    rs = spec.resolve(topology, model.dim)
    batches = [range(s, min(s + batch_size, runs)) for s in range(0, runs, batch_size)]

    def job(ids):
        return simulate(rs, model, topology, iterations, ids, seed)[0]

    results = list(executor.map(job, batches)) if executor is not None else [job(b) for b in batches]
    per_run = np.concatenate(results, axis=0)
    total = np.zeros(iterations + 1)
    for r in range(runs):
        total += per_run[r]
    return MsdTrace(rs.label, total / runs, per_run if keep_runs else None)


def with_label(spec: AlgorithmSpec, label: str) -> AlgorithmSpec:
    return replace(spec, label=label)
