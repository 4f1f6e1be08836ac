"""Speaker footprints in personalized acoustic models: a desk-scale bench.

A synthetic speech-like corpus feeds a small TDNN acoustic model that is
fine-tuned per client, as in one federated-learning round.  Two attacks then
decide whether two personalized models were adapted on the same speaker.
"""

from .asv import EerResult, ScoredTrials, Trial, build_trials, compute_eer, det_curve
from .attack_a1 import DeltaStats, FootprintStats, SimilarityConfig, similarity
from .attack_a2 import PLDA, ExtractorTopology, FootprintEmbedder
from .config import ExperimentConfig
from .exceptions import (
    ConfigurationError,
    EvaluationError,
    FedprintError,
    FormatError,
    LayerRangeError,
    MissingArtifactError,
    TopologyMismatchError,
    TrainingDivergenceError,
    UnknownModelError,
)
from .fl import ModelRegistry, federated_average, personalize_all, train_global
from .nn import LayerSpec, ModelParams, TrainConfig, forward, init_model, mlp_specs
from .pipeline import RunReport, run_pipeline
from .synth import GenConfig, PartitionSizes, make_partitions

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DeltaStats", "EerResult", "EvaluationError", "ExperimentConfig",
    "ExtractorTopology", "FedprintError", "FootprintEmbedder", "FootprintStats",
    "FormatError", "GenConfig", "LayerRangeError", "LayerSpec", "MissingArtifactError",
    "ModelParams", "ModelRegistry", "PLDA", "PartitionSizes", "RunReport", "ScoredTrials",
    "SimilarityConfig", "TopologyMismatchError", "TrainConfig", "TrainingDivergenceError",
    "Trial", "UnknownModelError", "build_trials", "compute_eer", "det_curve",
    "federated_average", "forward", "init_model", "make_partitions", "mlp_specs",
    "personalize_all", "run_pipeline", "similarity", "train_global",
]
