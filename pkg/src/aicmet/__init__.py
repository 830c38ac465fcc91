"""Amortized in-context mixed-effect modelling of pharmacokinetic studies.

The package simulates populations of compartmental PK trajectories driven by
Ornstein-Uhlenbeck parameter processes, and trains an encoder/decoder network
(on a small self-contained reverse-mode autodiff engine) that predicts new
individuals from a study context in a single forward pass.
"""

from .inference import (EvalProtocolConfig, evaluate_study, log_rmse, posterior_predictive,
                        synthesize_population, vpc_percentiles)
from .model import AICMET, GaussianPosterior, ModelConfig
from .ou import PriorConfig, StudyHyperParams
from .pk import DoseEvent, KineticParams, Route, bateman, integrate_path
from .simulate import IndividualRecord, SimulationConfig, StudyRecord, generate_study, partition_study
from .training import TrainerConfig, train

__version__ = "0.1.0"

__all__ = [
    "AICMET", "DoseEvent", "EvalProtocolConfig", "GaussianPosterior", "IndividualRecord", "KineticParams",
    "ModelConfig", "PriorConfig", "Route", "SimulationConfig", "StudyHyperParams", "StudyRecord",
    "TrainerConfig", "bateman", "evaluate_study", "generate_study", "integrate_path", "log_rmse",
    "partition_study", "posterior_predictive", "synthesize_population", "train", "vpc_percentiles",
]
