"""Shipped bilevel problem instances."""

from .hypercleaning import (
    DEFAULT_REG_C,
    Dataset,
    HyperCleaning,
    corrupt_labels,
    fit_weighted_logistic,
    make_hypercleaning,
    read_csv_dataset,
    synth_gaussian_dataset,
    write_csv_dataset,
)
from .logistic import LogisticCoupled, make_logistic
from .quadratic import QuadraticBilevel, QuadraticBilevelSpec, make_quadratic, normalize_noise

__all__ = [
    "DEFAULT_REG_C",
    "Dataset",
    "HyperCleaning",
    "LogisticCoupled",
    "QuadraticBilevel",
    "QuadraticBilevelSpec",
    "corrupt_labels",
    "fit_weighted_logistic",
    "make_hypercleaning",
    "make_logistic",
    "make_quadratic",
    "normalize_noise",
    "read_csv_dataset",
    "synth_gaussian_dataset",
    "write_csv_dataset",
]
