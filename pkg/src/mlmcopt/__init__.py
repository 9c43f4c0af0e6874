"""Multilevel Monte Carlo robust optimal control of elliptic PDEs with lognormal coefficients."""

from .field_sampler import CovarianceSpec, KLBasis, SampleKey, build_basis, lognormal_field, sample_gaussian_field
from .grid import GridFunction, GridHierarchy, LevelError, inner_product, norm
from .problem import FieldFunction, ProblemSpec, Reaction, preset

__all__ = [
    "CovarianceSpec",
    "FieldFunction",
    "GridFunction",
    "GridHierarchy",
    "KLBasis",
    "LevelError",
    "ProblemSpec",
    "Reaction",
    "SampleKey",
    "build_basis",
    "inner_product",
    "lognormal_field",
    "norm",
    "preset",
    "sample_gaussian_field",
]
