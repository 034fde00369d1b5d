"""Experiment configuration: schema, validation and construction of runtime objects."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import streams
from .algorithms import AlgorithmSpec
from .energy import ACTIVE_ENERGY, EnergyParams
from .model import generate_model
from .topology import (NetworkTopology, complete_graph, identity_weights, metropolis_weights, path_graph,
                       random_erdos_renyi_graph, random_geometric_graph, star_graph, uniform_weights)

SCHEMA_VERSION = 1
WEIGHT_RULES = ("metropolis", "uniform", "identity")


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeometricTopology(_Strict):
    kind: Literal["geometric"] = "geometric"
    n_nodes: int = Field(ge=1)
    radius: float = Field(gt=0)


class ErdosRenyiTopology(_Strict):
    kind: Literal["erdos_renyi"] = "erdos_renyi"
    n_nodes: int = Field(ge=1)
    p: float = Field(gt=0, le=1)


class FixedTopology(_Strict):
    kind: Literal["complete", "path", "star"]
    n_nodes: int = Field(ge=1)


class EdgeListTopology(_Strict):
    kind: Literal["edge_list"] = "edge_list"
    path: str
    n_nodes: int | None = Field(default=None, ge=1)


TopologyConfig = Union[GeometricTopology, ErdosRenyiTopology, FixedTopology, EdgeListTopology]


class ModelConfig(_Strict):
    L: int = Field(ge=1)
    sigma_u: list[float] | None = None
    sigma_u_range: tuple[float, float] = (0.8, 1.2)
    sigma_v2: float | list[float] = 1e-3
    w_true: list[float] | None = None

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.sigma_u_range
        if not 0 < lo <= hi:
            raise ValueError("sigma_u_range must satisfy 0 < lo <= hi")
        if self.w_true is not None and len(self.w_true) != self.L:
            raise ValueError(f"w_true has length {len(self.w_true)}, expected L={self.L}")
        return self


class AlgorithmConfig(_Strict):
    kind: Literal["diffusion", "rcd", "partial", "cd", "dcd"]
    label: str | None = None
    mu: float | list[float]
    A: Literal["metropolis", "uniform", "identity"] = "identity"
    C: Literal["metropolis", "uniform", "identity"] = "metropolis"
    M: int | None = Field(default=None, ge=0)
    M_grad: int | None = Field(default=None, ge=0)
    m_k: int | list[int] | None = None
    ratio: float | None = Field(default=None, gt=0, description="rcd: pick m_k = max(1, round(2 deg_k / ratio))")
    e_a: float | None = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _check(self):
        kind = self.kind
        if kind in ("partial", "cd", "dcd") and self.M is None:
            raise ValueError(f"{kind} requires M")
        if kind == "dcd" and self.M_grad is None:
            raise ValueError("dcd requires M_grad")
        if kind != "dcd" and self.M_grad is not None:
            raise ValueError(f"M_grad only applies to dcd, not {kind}")
        if kind not in ("partial", "cd", "dcd") and self.M is not None:
            raise ValueError(f"M does not apply to {kind}")
        if kind != "rcd" and (self.m_k is not None or self.ratio is not None):
            raise ValueError("m_k and ratio only apply to rcd")
        if self.m_k is not None and self.ratio is not None:
            raise ValueError("give either m_k or ratio, not both")
        mus = self.mu if isinstance(self.mu, list) else [self.mu]
        if not all(m > 0 for m in mus):
            raise ValueError("mu must be positive")
        return self

    @property
    def name(self) -> str:
        return self.label or self.kind


class EnergyConfig(_Strict):
    horizon_s: int = Field(ge=1)
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
    lighting_range: tuple[float, float] = (0.5, 1.0)
    initial_energy: float | None = None

    def params(self) -> EnergyParams:
        fields = self.model_dump(exclude={"horizon_s", "initial_energy"})
        return EnergyParams(**fields, e_a=dict(ACTIVE_ENERGY))


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = "custom"
    topology: TopologyConfig = Field(discriminator="kind")
    model: ModelConfig
    algorithms: list[AlgorithmConfig] = Field(min_length=1)
    iterations: int = Field(ge=1)
    runs: int = Field(ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    batch_size: int = Field(default=50, ge=1)
    warmup: int = Field(default=50, ge=0, description="iterations skipped by compare's deviation report")
    energy: EnergyConfig | None = None
    out: str | None = None

    @model_validator(mode="after")
    def _unique_labels(self):
        names = [a.name for a in self.algorithms]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ValueError(f"algorithm labels must be unique; duplicated: {dup}")
        return self

    # serialization

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.model_validate_json(text)
        except ValidationError as exc:
            raise ConfigError(_describe(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_json(text)

    def updated(self, **changes) -> "ExperimentConfig":
        data = self.model_dump()
        data.update({k: v for k, v in changes.items() if v is not None})
        try:
            return ExperimentConfig.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(_describe(exc)) from None

    # runtime objects

    def build_topology(self) -> NetworkTopology:
        t = self.topology
        rng = streams.stream(self.seed, streams.TOPOLOGY)
        if t.kind == "geometric":
            return random_geometric_graph(t.n_nodes, t.radius, rng)
        if t.kind == "erdos_renyi":
            return random_erdos_renyi_graph(t.n_nodes, t.p, rng)
        if t.kind == "complete":
            return complete_graph(t.n_nodes)
        if t.kind == "path":
            return path_graph(t.n_nodes)
        if t.kind == "star":
            return star_graph(t.n_nodes - 1)
        return NetworkTopology.from_edge_list_file(t.path, t.n_nodes)

    def build_model(self, n_nodes: int):
        m = self.model
        sigma_v = np.sqrt(np.asarray(m.sigma_v2, dtype=float))
        if m.sigma_u is not None and len(m.sigma_u) != n_nodes:
            raise ConfigError(f"model.sigma_u has {len(m.sigma_u)} entries but the topology has {n_nodes} nodes")
        if np.ndim(sigma_v) and sigma_v.size != n_nodes:
            raise ConfigError(f"model.sigma_v2 has {sigma_v.size} entries but the topology has {n_nodes} nodes")
        return generate_model(m.L, n_nodes, sigma_u=m.sigma_u, sigma_v=sigma_v, seed=self.seed,
                              sigma_u_range=m.sigma_u_range, w_true=m.w_true)

    def build_specs(self, topology: NetworkTopology) -> list[AlgorithmSpec]:
        return [algorithm_spec(a, topology) for a in self.algorithms]


def weight_matrix(rule: str, topology: NetworkTopology):
    if rule == "metropolis":
        return metropolis_weights(topology)
    if rule == "uniform":
        return uniform_weights(topology)
    return identity_weights(topology.n_nodes)


def rcd_subset_sizes(topology: NetworkTopology, ratio: float) -> np.ndarray:
    """``m_k = max(1, round(2 deg_k / ratio))`` capped at ``deg_k``."""
    deg = topology.degree
    return np.minimum(np.maximum(1, np.rint(2 * deg / ratio)).astype(int), deg)


def algorithm_spec(a: AlgorithmConfig, topology: NetworkTopology) -> AlgorithmSpec:
    m_k = a.m_k
    if a.ratio is not None:
        m_k = rcd_subset_sizes(topology, a.ratio)
    elif isinstance(m_k, list):
        m_k = np.asarray(m_k)
    mu = np.asarray(a.mu, dtype=float) if isinstance(a.mu, list) else a.mu
    return AlgorithmSpec(a.kind, mu, A=weight_matrix(a.A, topology), C=weight_matrix(a.C, topology),
                         M=a.M, M_grad=a.M_grad, m_k=m_k, label=a.name)


def _describe(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "invalid config: " + "; ".join(lines)
