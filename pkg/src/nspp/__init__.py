"""Nonstationary spatial point process modelling on random tessellations.

The intensity surface is piecewise built from independent Gaussian processes,
one per cell of a Voronoi tessellation with random generators, pushed through
the standard normal CDF and scaled by a per-cell rate ceiling.  The package
simulates such patterns exactly and fits them by MCMC without discretising
the Gaussian processes: field values are revealed retrospectively, only at
the finitely many locations the samplers actually visit.
"""

from .geometry import InvalidDomainError, Location, Partition, SpatialDomain, assign_region
from .gp import GPHyper, GPRegionState, NumericalError, correlation, covariance_matrix, gp_logdensity
from .model import (
    CovariateField,
    DataError,
    MarkedPointSet,
    ParamState,
    PriorConfig,
    link_F,
    repulsive_log_prior,
    sample_generators_repulsive,
)
from .simulate import SyntheticDataset, simulate_dataset, thinning_sample
from .mcmc import TuningConfig, run_chain
from .config import ConfigError, RunConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CovariateField",
    "DataError",
    "GPHyper",
    "GPRegionState",
    "InvalidDomainError",
    "Location",
    "MarkedPointSet",
    "NumericalError",
    "ParamState",
    "Partition",
    "PriorConfig",
    "RunConfig",
    "SpatialDomain",
    "SyntheticDataset",
    "TuningConfig",
    "assign_region",
    "correlation",
    "covariance_matrix",
    "gp_logdensity",
    "link_F",
    "repulsive_log_prior",
    "run_chain",
    "sample_generators_repulsive",
    "simulate_dataset",
    "thinning_sample",
]
