"""Counterfactual inference in structural causal models with context-dependent mechanism orientation."""
from .inverter import FitResult, InverterModel, OracleInverter, TrainConfig, fit_inverter
from .scm import CounterfactualQuery, Intervention, Mechanism, TriangularScm
from .zoo import DatasetBundle, MechanismFamily, SweepConfig, make_scm, sample_dataset

__version__ = "0.1.0"

__all__ = [
    "CounterfactualQuery",
    "DatasetBundle",
    "FitResult",
    "Intervention",
    "InverterModel",
    "Mechanism",
    "MechanismFamily",
    "OracleInverter",
    "SweepConfig",
    "TrainConfig",
    "TriangularScm",
    "fit_inverter",
    "make_scm",
    "sample_dataset",
]
