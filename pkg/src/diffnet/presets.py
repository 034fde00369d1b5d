"""Built-in experiment configurations."""

from __future__ import annotations

from .config import (AlgorithmConfig, ConfigError, EnergyConfig, ExperimentConfig, GeometricTopology,
                     ModelConfig)
from .energy import ACTIVE_ENERGY


def exp1() -> ExperimentConfig:
    """Small network used to check the mean-square model against simulation."""
    mu = 1e-3
    return ExperimentConfig(
        name="exp1",
        topology=GeometricTopology(n_nodes=10, radius=0.4),
        model=ModelConfig(L=5, sigma_v2=1e-3),
        algorithms=[
            AlgorithmConfig(kind="diffusion", mu=mu, A="identity", C="metropolis"),
            AlgorithmConfig(kind="cd", mu=mu, C="metropolis", M=3),
            AlgorithmConfig(kind="dcd", mu=mu, A="identity", C="metropolis", M=3, M_grad=1),
        ],
        iterations=20000,
        runs=100,
        seed=7,
    )


EXP2_CD_M = (5, 10, 20, 30, 40, 50)
EXP2_DCD_M_GRAD = (1, 5, 10, 20, 30, 45)


def exp2() -> ExperimentConfig:
    """Large network; CD and DCD over a range of compression ratios."""
    mu = 3e-2
    algs = [AlgorithmConfig(kind="diffusion", mu=mu, A="identity", C="metropolis")]
    algs += [AlgorithmConfig(kind="cd", label=f"cd_M{m}", mu=mu, C="metropolis", M=m) for m in EXP2_CD_M]
    algs += [AlgorithmConfig(kind="dcd", label=f"dcd_Mg{g}", mu=mu, A="identity", C="metropolis", M=5, M_grad=g)
             for g in EXP2_DCD_M_GRAD]
    return ExperimentConfig(
        name="exp2",
        topology=GeometricTopology(n_nodes=50, radius=0.25),
        model=ModelConfig(L=50, sigma_v2=1e-3),
        algorithms=algs,
        iterations=3000,
        runs=100,
        seed=11,
    )


def exp3() -> ExperimentConfig:
    """Sensor network running under energy-neutral sleep scheduling.

    Compression ratio 20 for RCD, partial diffusion and DCD, 80/65 for CD.
    """
    return ExperimentConfig(
        name="exp3",
        topology=GeometricTopology(n_nodes=80, radius=0.2),
        model=ModelConfig(L=40, sigma_v2=1e-3),
        algorithms=[
            AlgorithmConfig(kind="diffusion", mu=5.4e-3, A="metropolis", C="metropolis",
                            e_a=ACTIVE_ENERGY["diffusion"]),
            AlgorithmConfig(kind="rcd", mu=1.14e-2, A="metropolis", C="identity", ratio=20,
                            e_a=ACTIVE_ENERGY["rcd"]),
            AlgorithmConfig(kind="partial", mu=4.4e-3, A="metropolis", C="identity", M=4,
                            e_a=ACTIVE_ENERGY["partial"]),
            AlgorithmConfig(kind="cd", mu=4.8e-2, A="identity", C="metropolis", M=25,
                            e_a=ACTIVE_ENERGY["cd"]),
            AlgorithmConfig(kind="dcd", mu=6e-3, A="metropolis", C="metropolis", M=2, M_grad=2,
                            e_a=ACTIVE_ENERGY["dcd"]),
        ],
        iterations=5000,
        runs=10,
        seed=13,
        energy=EnergyConfig(horizon_s=100_000),
    )


PRESETS = {"exp1": exp1, "exp2": exp2, "exp3": exp3}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
