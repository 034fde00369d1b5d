"""Experiment orchestration and CSV output.

All outputs are deterministic functions of the configuration: runs are cut
into fixed-size batches that may execute on any number of worker threads,
and results are reduced in run order.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import algorithms, energy, theory
from .algorithms import MsdTrace
from .config import ConfigError, ExperimentConfig

THREADS_ENV = "DIFFNET_THREADS"


def resolve_threads(threads: int | None = None) -> int:
    """``threads`` if given, else ``$DIFFNET_THREADS``, else 1."""
    if threads is None:
        env = os.environ.get(THREADS_ENV, "").strip()
        if not env:
            return 1
        try:
            threads = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
    if threads < 1:
        raise ConfigError(f"thread count must be positive, got {threads}")
    return threads


@dataclass
class Experiment:
    """Runtime objects built from a config."""

    config: ExperimentConfig
    topology: object
    model: object
    specs: list

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "Experiment":
        topo = cfg.build_topology()
        model = cfg.build_model(topo.n_nodes)
        return cls(cfg, topo, model, cfg.build_specs(topo))


def simulate(exp: Experiment, threads: int | None = None) -> list[MsdTrace]:
    cfg = exp.config
    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
        return [algorithms.run(spec, exp.model, exp.topology, cfg.iterations, cfg.runs, cfg.seed,
                               batch_size=cfg.batch_size, executor=pool)
                for spec in exp.specs]


def theory_inputs(spec, model, L: int) -> theory.TheoryInputs:
    """Model inputs for a spec the analysis covers (``A = I``, doubly stochastic ``C``)."""
    N = model.n_nodes
    if spec.kind not in ("diffusion", "cd", "dcd"):
        raise ConfigError(f"{spec.name}: no mean-square model for kind {spec.kind!r}")
    A = np.eye(N) if spec.A is None or spec.kind == "cd" else np.asarray(spec.A)
    if not np.array_equal(A, np.eye(N)):
        raise ConfigError(f"{spec.name}: the mean-square model requires A = I")
    C = np.eye(N) if spec.C is None else np.asarray(spec.C)
    M = L if spec.kind == "diffusion" else spec.M
    M_grad = spec.M_grad if spec.kind == "dcd" else L
    mu = np.broadcast_to(np.asarray(spec.step_sizes, dtype=float), (N,))
    try:
        return theory.TheoryInputs.from_model(model, C, mu, M, M_grad)
    except theory.TheoryError as exc:
        raise ConfigError(f"{spec.name}: {exc}") from None


def supported_specs(exp: Experiment):
    """Split specs into those with a mean-square model and the names of the rest."""
    ok, skipped = [], []
    for spec in exp.specs:
        try:
            ok.append((spec, theory_inputs(spec, exp.model, exp.model.dim)))
        except ConfigError:
            skipped.append(spec.name)
    return ok, skipped


def predict(exp: Experiment, threads: int | None = None):
    """Theoretical MSD curves for every supported algorithm; returns ``(traces, skipped)``."""
    pairs, skipped = supported_specs(exp)
    iters = exp.config.iterations

    def job(pair):
        spec, inp = pair
        return MsdTrace(spec.name, theory.predict_msd(inp, iters, exp.model.w_true))

    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
        return list(pool.map(job, pairs)), skipped


@dataclass(frozen=True)
class Deviation:
    label: str
    max_abs_db: float
    steady_sim_db: float
    steady_theory_db: float

    @property
    def steady_gap_db(self) -> float:
        return self.steady_sim_db - self.steady_theory_db


def steady_window(n_iterations: int, fraction: float = 0.1) -> slice:
    """Last ``fraction`` of the iterations (at least one)."""
    width = max(1, int(round(fraction * n_iterations)))
    return slice(n_iterations + 1 - width, n_iterations + 1)


def deviations(sim: list[MsdTrace], theo: list[MsdTrace], warmup: int) -> list[Deviation]:
    by_label = {t.label: t for t in theo}
    out = []
    for s in sim:
        t = by_label.get(s.label)
        if t is None:
            continue
        win = steady_window(s.iterations)
        diff = np.abs(s.msd_db[warmup + 1:] - t.msd_db[warmup + 1:])
        out.append(Deviation(s.label, float(diff.max()) if diff.size else 0.0,
                             float(10 * np.log10(s.msd[win].mean())),
                             float(10 * np.log10(t.msd[win].mean()))))
    return out


def step_bounds(exp: Experiment):
    """``[(label, bounds)]`` for every algorithm with a mean model."""
    pairs, skipped = supported_specs(exp)
    return [(spec.name, theory.step_size_bounds(inp)) for spec, inp in pairs], skipped


def run_eno(exp: Experiment, threads: int | None = None, horizon: int | None = None):
    cfg = exp.config
    ecfg = cfg.energy
    if ecfg is None:
        raise ConfigError("config has no 'energy' section")
    params = ecfg.params()
    horizon = horizon or ecfg.horizon_s
    e_as = [a.e_a if a.e_a is not None else params.active_energy(a.kind) for a in cfg.algorithms]

    def job(i):
        return energy.eno_run([exp.specs[i]], exp.model, exp.topology, horizon, params, cfg.seed,
                              runs=cfg.runs, active_energy=[e_as[i]], initial_energy=ecfg.initial_energy)[0]

    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
        return list(pool.map(job, range(len(exp.specs))))


# CSV

def _fmt(x) -> str:
    return repr(float(x))


def _writer(buf):
    return csv.writer(buf, lineterminator="\n")


def msd_csv(traces: list[MsdTrace], kind: str | list[str] = "sim", index: str = "iter") -> str:
    """Rows ``iter,algorithm,msd,msd_db,kind``; ``kind`` is ``sim`` or ``theory``."""
    kinds = [kind] * len(traces) if isinstance(kind, str) else list(kind)
    buf = io.StringIO()
    w = _writer(buf)
    w.writerow([index, "algorithm", "msd", "msd_db", "kind"])
    for trace, k in zip(traces, kinds):
        db = trace.msd_db
        for i in range(trace.msd.size):
            w.writerow([i, trace.label, _fmt(trace.msd[i]), _fmt(db[i]), k])
    return buf.getvalue()


def bounds_csv(bounds) -> str:
    buf = io.StringIO()
    w = _writer(buf)
    w.writerow(["algorithm", "node", "mu_bound"])
    for label, b in bounds:
        for k, v in enumerate(b):
            w.writerow([label, k, _fmt(v)])
    return buf.getvalue()


def sleep_csv(results) -> str:
    buf = io.StringIO()
    w = _writer(buf)
    w.writerow(["time_s", "algorithm", "mean_sleep_s"])
    for r in results:
        for t, v in enumerate(r.mean_sleep):
            w.writerow([t, r.label, "" if np.isnan(v) else _fmt(v)])
    return buf.getvalue()


def nodes_csv(result, every: int = 1) -> str:
    """Node trace of the recorded run, one row per node every ``every`` seconds."""
    buf = io.StringIO()
    w = _writer(buf)
    w.writerow(["time_s", "node", "asleep", "stored_energy_j", "sleep_duration_s"])
    for t in range(0, result.asleep.shape[0], every):
        for k in range(result.asleep.shape[1]):
            d = result.sleep_duration[t, k]
            w.writerow([t, k, int(result.asleep[t, k]), _fmt(result.stored[t, k]), "" if np.isnan(d) else _fmt(d)])
    return buf.getvalue()
