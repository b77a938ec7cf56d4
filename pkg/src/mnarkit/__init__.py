"""Toolkit for metabolomics inference under value-dependent missingness.

Subpackages cover the full workflow: selection-CDF math, data ingestion,
missingness-mechanism estimation, inverse-probability-weighted factor
analysis, likelihood-based differential abundance, genome-scale score
tests, and a simulation harness with imputation baselines.
"""

__version__ = "0.1.0"

from .data import (
    DesignMatrix,
    GenotypeMatrix,
    MetabolitePartition,
    ObservedMatrix,
    load_design,
    load_genotypes,
    load_matrix,
    partition_metabolites,
    write_matrix,
)
from .selection import QuadratureRule, SelectionCdf, miss_prob, miss_prob_partials, psi

__all__ = [
    "__version__",
    "DesignMatrix",
    "GenotypeMatrix",
    "MetabolitePartition",
    "ObservedMatrix",
    "QuadratureRule",
    "SelectionCdf",
    "load_design",
    "load_genotypes",
    "load_matrix",
    "miss_prob",
    "miss_prob_partials",
    "partition_metabolites",
    "psi",
    "write_matrix",
]
