"""Deep bidirectional LSTM sequence labelling with collapsed-alignment and
transducer losses, beam-search decoding, and reproducible training."""

from .cells import NetworkConfig, ParamSet, param_count
from .data import NormStats, SynthSpec, Utterance
from .decoding import Hypothesis, LabelMapping, edit_distance, score_per
from .models import CtcModel, PredictionLm, TransducerModel, assemble_pretrained
from .numerics import Rng
from .training import OptimizerState, TrainSchedule, TrainSettings, run_training

__version__ = "0.1.0"

__all__ = [
    "CtcModel",
    "Hypothesis",
    "LabelMapping",
    "NetworkConfig",
    "NormStats",
    "OptimizerState",
    "ParamSet",
    "PredictionLm",
    "Rng",
    "SynthSpec",
    "TrainSchedule",
    "TrainSettings",
    "TransducerModel",
    "Utterance",
    "assemble_pretrained",
    "edit_distance",
    "param_count",
    "run_training",
    "score_per",
    "__version__",
]
