"""Entropic optimal transport engine with an exact small-instance oracle."""

from .backend import BACKEND, get_kernel
from .oracle import MAX_ORACLE_SIZE, exact_emd_oracle
from .sinkhorn import (
    ETA,
    CostMatrix,
    Distribution,
    SinkhornConfig,
    TransportPlan,
    build_cost,
    entropic_ot,
    grid_coords,
    normalize_to_simplex,
    sinkhorn,
)

__all__ = [
    "BACKEND",
    "ETA",
    "MAX_ORACLE_SIZE",
    "CostMatrix",
    "Distribution",
    "SinkhornConfig",
    "TransportPlan",
    "build_cost",
    "entropic_ot",
    "exact_emd_oracle",
    "get_kernel",
    "grid_coords",
    "normalize_to_simplex",
    "sinkhorn",
]
