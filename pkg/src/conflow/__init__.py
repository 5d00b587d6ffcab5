"""Joint generation of molecular graphs and conformer ensembles with a
conditional flow over a shared representative geometry."""

from .core import (
    ModelOutput,
    MolecularGraph,
    NoisyState,
    TrainingTuple,
    Vocabularies,
    geom_vocab,
    qm9_vocab,
    validate_graph,
    zero_center,
)
from .data import (
    build_training_tuples,
    compute_scale,
    dataset_stats,
    generate_toy_dataset,
    preprocess,
    read_dataset,
    read_sdf,
    rotatable_bonds,
    toy_vocab,
    write_dataset,
    write_sdf,
    write_xyz,
)
from .losses import LossBreakdown, LossWeights, total_loss
from .metrics import (
    EnergyOracle,
    HarmonicBondOracle,
    OracleUnavailable,
    SubprocessEnergyOracle,
    canonical_key,
    conformer_diversity,
    coverage_metrics,
    graph_metrics,
    is_valid,
    kabsch_rmsd,
    strain_energy,
)
from .model import (
    MODEL_PRESETS,
    DualFlowNet,
    ModelConfig,
    collate_states,
    count_parameters,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .sampling import draw_sizes, generate, generate_ensemble, generate_many, sample_prior
from .training import (
    Ema,
    InterpolantConfig,
    OptimizerConfig,
    TrainConfig,
    apply_ema_weights,
    load_train_config,
    lr_at,
    make_noisy_batch,
    save_train_config,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "DualFlowNet",
    "Ema",
    "EnergyOracle",
    "HarmonicBondOracle",
    "InterpolantConfig",
    "LossBreakdown",
    "LossWeights",
    "MODEL_PRESETS",
    "ModelConfig",
    "ModelOutput",
    "MolecularGraph",
    "NoisyState",
    "OptimizerConfig",
    "OracleUnavailable",
    "SubprocessEnergyOracle",
    "TrainConfig",
    "TrainingTuple",
    "Vocabularies",
    "apply_ema_weights",
    "build_training_tuples",
    "canonical_key",
    "collate_states",
    "compute_scale",
    "conformer_diversity",
    "count_parameters",
    "coverage_metrics",
    "dataset_stats",
    "draw_sizes",
    "generate",
    "generate_ensemble",
    "generate_many",
    "generate_toy_dataset",
    "geom_vocab",
    "graph_metrics",
    "is_valid",
    "kabsch_rmsd",
    "load_checkpoint",
    "load_train_config",
    "lr_at",
    "make_noisy_batch",
    "model_from_checkpoint",
    "preprocess",
    "qm9_vocab",
    "read_dataset",
    "read_sdf",
    "rotatable_bonds",
    "sample_prior",
    "save_checkpoint",
    "save_train_config",
    "strain_energy",
    "total_loss",
    "toy_vocab",
    "train",
    "validate_graph",
    "write_dataset",
    "write_sdf",
    "write_xyz",
    "zero_center",
]
