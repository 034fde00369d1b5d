"""Energy-neutral operation: harvesting, super-capacitor storage and sleep scheduling.

Time advances in ticks of one second. At every tick a node is either active
(it runs one iteration of its algorithm with the neighbors that are active in
the same tick) or asleep. Whenever its sleep timer expires the node computes
how long to sleep next from its stored energy, the energy it expects to spend
and the power it currently harvests.

Stored energy is the super-capacitor energy ``C_s V^2 / 2``. A node only runs
its active phase when the capacitor is above the activation level
``C_s V_ref^2 / 2``; otherwise it goes straight back to sleep. The sleep rule
sees the usable energy above that level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import streams
from .algorithms import STEPS, AlgorithmSpec, DivergenceError, DrawSource, MsdTrace, network_msd, DIVERGENCE_LIMIT

# Active-phase energy per algorithm kind, in joules.
ACTIVE_ENERGY = {
    "diffusion": 8.58e-2,
    "rcd": 1.61e-2,
    "partial": 5.4e-3,
    "cd": 7.51e-2,
    "dcd": 5.4e-3,
}
HARVEST_CHUNK = 4096


@dataclass(frozen=True)
class EnergyParams:
    """Storage, consumption and harvesting constants.

    Attributes
    ----------
    C_s : float
        Super-capacitor capacitance (F).
    P_leak, P_sleep : float
        Leakage and sleep-mode power (W).
    T_s_min, T_s_max : float
        Bounds on a sleep period (s).
    V_ref : float
        Minimal voltage needed to wake up (V).
    V_max : float
        Capacitor voltage at full charge (V).
    eta : float
        Power-manager efficiency.
    E0, f, sigma_n2 : float
        Harvest amplitude (J), frequency (Hz) and noise variance.
    lighting_range : tuple
        Range of the per-node multiplicative harvest scale.
    e_a : dict
        Active-phase energy (J) keyed by algorithm kind.
    """

    C_s: float = 0.09
    P_leak: float = 3.3e-6
    P_sleep: float = 3.01e-5
    T_s_min: float = 1.0
    T_s_max: float = 300.0
    V_ref: float = 3.5
    V_max: float = 5.0
    eta: float = 0.8
    E0: float = 0.67
    f: float = 1e-5
    sigma_n2: float = 1e-6
    lighting_range: tuple = (0.5, 1.0)
    e_a: dict = field(default_factory=lambda: dict(ACTIVE_ENERGY))

    def __post_init__(self):
        for name in ("C_s", "P_leak", "P_sleep", "T_s_min", "T_s_max", "V_ref", "V_max", "eta", "E0", "f"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.sigma_n2 < 0:
            raise ValueError("sigma_n2 must be nonnegative")
        if self.T_s_min > self.T_s_max:
            raise ValueError("T_s_min must not exceed T_s_max")
        if self.V_ref > self.V_max:
            raise ValueError("V_ref must not exceed V_max")
        lo, hi = self.lighting_range
        if not 0 < lo <= hi:
            raise ValueError(f"lighting_range must satisfy 0 < lo <= hi, got {self.lighting_range}")

    @property
    def capacity(self) -> float:
        """Energy stored at ``V_max`` (J)."""
        return 0.5 * self.C_s * self.V_max**2

    @property
    def reserve(self) -> float:
        """Energy stored at ``V_ref`` (J); waking up requires at least this much."""
        return 0.5 * self.C_s * self.V_ref**2

    def active_energy(self, kind: str) -> float:
        try:
            return float(self.e_a[kind])
        except KeyError:
            raise ValueError(f"no active-phase energy for algorithm kind {kind!r}") from None


@dataclass
class AgentEnergyState:
    """Energy bookkeeping of one node.

    ``last_sleep`` is the most recently scheduled sleep duration (0 before the
    first wake-up) and ``awake_at`` the tick at which the node wakes next.
    """

    stored_energy: float
    last_sleep: float = 0.0
    awake_at: int = 0


def harvested_energy(t, params: EnergyParams, noise=0.0, scale=1.0):
    """Energy harvested during tick ``t``: ``scale * max(0, E0 sin(2 pi f t) + noise)``.

    ``noise`` is the Gaussian perturbation already drawn with variance
    ``params.sigma_n2``; pass 0 for the noiseless law.
    """
    raw = params.E0 * np.sin(2.0 * np.pi * params.f * np.asarray(t, dtype=float)) + noise
    return scale * np.maximum(raw, 0.0)


def consumed_energy(e_a, last_sleep, P_sleep):
    """Predicted spend of the next cycle: active energy plus the last sleep period at sleep power."""
    return e_a + P_sleep * last_sleep


def sleep_time(e_c, e_s, P_harv, params: EnergyParams):
    """Sleep duration ``(e_c - eta e_s) / (eta (P_harv - P_leak) - P_sleep)``, clamped.

    When stored energy already covers the next cycle (``e_c <= eta e_s``) the
    node sleeps ``T_s_min`` whatever the harvest; when it does not and the
    net harvest is not positive, it sleeps ``T_s_max``.
    """
    e_c, e_s, P_harv = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (e_c, e_s, P_harv)))
    eta = params.eta
    num = e_c - eta * e_s
    den = eta * (P_harv - params.P_leak) - params.P_sleep
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = num / den
    ok = (num > 0) & np.isfinite(raw) & (raw > 0)
    fallback = np.where(num <= 0, params.T_s_min, params.T_s_max)
    out = np.where(ok, np.clip(raw, params.T_s_min, params.T_s_max), fallback)
    return out if out.ndim else float(out)


@dataclass
class EnergyLedger:
    """Per-tick energy flows of one recorded run, each ``(ticks, N)``.

    ``stored[t]`` is the energy after tick ``t``; ``stored_before[0]`` is the
    initial energy. ``overflow`` is harvest lost to a full capacitor and
    ``shortfall`` the demand that an empty capacitor could not cover.
    """

    stored_before: np.ndarray
    stored: np.ndarray
    harvest: np.ndarray
    consumption: np.ndarray
    overflow: np.ndarray
    shortfall: np.ndarray
    eta: float
    P_leak: float

    def residual(self) -> np.ndarray:
        """``stored - (before + eta harvest - leak - consumption - overflow + shortfall)``."""
        expected = (self.stored_before + self.eta * self.harvest - self.P_leak
                    - self.consumption - self.overflow + self.shortfall)
        return self.stored - expected


@dataclass
class EnoResult:
    """Outcome of :func:`eno_run` for one algorithm.

    ``msd`` and ``mean_sleep`` are indexed by time in seconds ``0..horizon``
    and averaged over runs (and nodes for the sleep duration). Node traces
    ``asleep``, ``stored`` and ``sleep_duration`` are ``(horizon, N)`` for the
    recorded run.
    """

    label: str
    e_a: float
    msd: MsdTrace
    mean_sleep: np.ndarray
    asleep: np.ndarray
    stored: np.ndarray
    sleep_duration: np.ndarray
    active_ticks: np.ndarray  # (N, B) number of active ticks per node and run
    final_states: list = field(default_factory=list)  # AgentEnergyState per node, recorded run
    ledger: EnergyLedger | None = None

    def mean_sleep_after(self, warmup: float) -> float:
        t = np.arange(self.mean_sleep.size)
        return float(np.nanmean(self.mean_sleep[t >= warmup]))


def lighting_scales(n_nodes: int, params: EnergyParams, seed: int) -> np.ndarray:
    lo, hi = params.lighting_range
    return streams.stream(seed, streams.LIGHTING).uniform(lo, hi, n_nodes)


class _HarvestNoise:
    """Per-(run, node) Gaussian harvest noise, drawn in chunks."""

    def __init__(self, seed, run_ids, n_nodes, sigma):
        self.sigma = sigma
        self.gens = [[streams.node_stream(seed, r, n, streams.HARVEST) for r in run_ids] for n in range(n_nodes)]
        self.shape = (n_nodes, len(run_ids))
        self._buf = None
        self._pos = HARVEST_CHUNK

    def next(self) -> np.ndarray:
        if self.sigma == 0:
            return np.zeros(self.shape)
        if self._pos == HARVEST_CHUNK:
            buf = np.empty((HARVEST_CHUNK,) + self.shape)
            for n, row in enumerate(self.gens):
                for b, g in enumerate(row):
                    buf[:, n, b] = g.standard_normal(HARVEST_CHUNK)
            self._buf = self.sigma * buf
            self._pos = 0
        self._pos += 1
        return self._buf[self._pos - 1]


def eno_run(specs, model, topology, horizon: int, params: EnergyParams | None = None, seed: int = 0,
            runs: int = 1, active_energy=None, initial_energy=None, record_run: int = 0,
            record_ledger: bool = False) -> list[EnoResult]:
    """Simulate energy-neutral operation for each algorithm in ``specs``.

    Parameters
    ----------
    specs : sequence of AlgorithmSpec
    model : LinearModel
    topology : NetworkTopology
    horizon : int
        Simulated duration in seconds (ticks).
    params : EnergyParams, optional
    seed : int
        Seeds data, masks and harvest noise; every algorithm sees the same
        harvest noise and lighting.
    runs : int
        Independent replications, simulated in lockstep.
    active_energy : sequence of float, optional
        Active-phase energy per spec; defaults to ``params.e_a[spec.kind]``.
    initial_energy : float, optional
        Initial stored energy; defaults to the activation level, i.e. no
        usable energy at start.
    record_run : int
        Replication whose node traces are returned.
    record_ledger : bool
        Also return the per-tick energy flows of ``record_run``.

    Returns
    -------
    list of EnoResult
        One per spec, in order.
    """
    params = params or EnergyParams()
    if horizon < 1 or runs < 1:
        raise ValueError("horizon and runs must be at least 1")
    if not 0 <= record_run < runs:
        raise ValueError(f"record_run must be in [0, {runs})")
    e_as = (list(active_energy) if active_energy is not None
            else [params.active_energy(s.kind) for s in specs])
    if len(e_as) != len(specs):
        raise ValueError("active_energy needs one value per spec")
    e0 = params.reserve if initial_energy is None else float(initial_energy)
    if not 0 <= e0 <= params.capacity:
        raise ValueError(f"initial_energy must be in [0, {params.capacity}]")
    scale = lighting_scales(topology.n_nodes, params, seed)
    return [_eno_single(spec, e_a, model, topology, horizon, params, seed, runs, scale, e0,
                        record_run, record_ledger)
            for spec, e_a in zip(specs, e_as)]


def _eno_single(spec: AlgorithmSpec, e_a, model, topology, horizon, params, seed, runs, scale, e0,
                record_run, record_ledger) -> EnoResult:
    rs = spec.resolve(topology, model.dim)
    N, B = rs.N, runs
    run_ids = list(range(runs))
    step = STEPS[rs.kind]
    src = DrawSource(rs, model, seed, run_ids)
    noise = _HarvestNoise(seed, run_ids, N, np.sqrt(params.sigma_n2))
    eta, cap, reserve = params.eta, params.capacity, params.reserve

    W = np.zeros((N, rs.L, B))
    stored = np.full((N, B), e0)
    remaining = np.zeros((N, B), dtype=int)
    last_sleep = np.zeros((N, B))
    current_sleep = np.full((N, B), np.nan)
    active_ticks = np.zeros((N, B), dtype=int)

    msd = np.empty((B, horizon + 1))
    msd[:, 0] = network_msd(W, model.w_true)
    mean_sleep = np.full(horizon + 1, np.nan)
    tr_asleep = np.empty((horizon, N), dtype=bool)
    tr_stored = np.empty((horizon, N))
    tr_sleep = np.empty((horizon, N))
    if record_ledger:
        led = {k: np.empty((horizon, N)) for k in ("before", "stored", "harvest", "cons", "over", "short")}

    for t in range(horizon):
        harvest = harvested_energy(t, params, noise.next(), scale[:, None])
        due = remaining == 0
        awake = due & (stored >= reserve)
        cons = np.where(awake, e_a, params.P_sleep)
        gross = stored + eta * harvest - params.P_leak - cons
        over = np.maximum(gross - cap, 0.0)
        short = np.maximum(-gross, 0.0)
        if record_ledger:
            led["before"][t] = stored[:, record_run]
        stored = gross - over + short

        if due.any():
            # Nodes whose timer fires schedule the next sleep; those below the
            # activation level skip the active phase but still wake up again later.
            e_c = consumed_energy(e_a, last_sleep, params.P_sleep)
            usable = np.maximum(stored - reserve, 0.0)
            T_s = sleep_time(e_c, usable, harvest, params)
            ticks = np.maximum(1, np.rint(T_s)).astype(int)
            remaining = np.where(due, ticks, remaining - 1)
            last_sleep = np.where(due, T_s, last_sleep)
            current_sleep = np.where(due, T_s, current_sleep)
        else:
            remaining = remaining - 1
        if awake.any():
            active_ticks += awake
            W = step(W, src.next(), rs, awake)
            bad = ~np.isfinite(W) | (np.abs(W) > DIVERGENCE_LIMIT)
            if bad.any():
                raise DivergenceError(t + 1, [run_ids[b] for b in np.flatnonzero(bad.any(axis=(0, 1)))], rs.label)

        msd[:, t + 1] = network_msd(W, model.w_true)
        if not np.isnan(current_sleep).all():
            mean_sleep[t + 1] = np.nanmean(current_sleep)
        tr_asleep[t] = ~awake[:, record_run]
        tr_stored[t] = stored[:, record_run]
        tr_sleep[t] = current_sleep[:, record_run]
        if record_ledger:
            led["stored"][t] = stored[:, record_run]
            led["harvest"][t] = harvest[:, record_run]
            led["cons"][t] = cons[:, record_run]
            led["over"][t] = over[:, record_run]
            led["short"][t] = short[:, record_run]

    total = np.zeros(horizon + 1)
    for b in range(B):
        total += msd[b]
    ledger = None
    if record_ledger:
        ledger = EnergyLedger(led["before"], led["stored"], led["harvest"], led["cons"], led["over"],
                              led["short"], eta, params.P_leak)
    final = [AgentEnergyState(float(stored[k, record_run]), float(last_sleep[k, record_run]),
                              horizon + int(remaining[k, record_run]))
             for k in range(N)]
    return EnoResult(rs.label, float(e_a), MsdTrace(rs.label, total / B), mean_sleep,
                     tr_asleep, tr_stored, tr_sleep, active_ticks, final, ledger)
