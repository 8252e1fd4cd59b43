from .core import (
    AttackConfig,
    AttackResult,
    AttackTrace,
    CPIConfig,
    InitStrategy,
    binary_search,
    cpi_init,
    fda_attack,
    run_attack,
    spatial_noise_attack,
)

__all__ = [
    "AttackConfig",
    "AttackResult",
    "AttackTrace",
    "CPIConfig",
    "InitStrategy",
    "binary_search",
    "cpi_init",
    "fda_attack",
    "run_attack",
    "spatial_noise_attack",
]
