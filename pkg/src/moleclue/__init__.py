"""Counterfactual conformers from an equivariant VAE with uncertainty-guided latent descent."""
from .clue import ClueConfig, ClueTrajectory, clue_objective, clue_optimize, rank_worst
from .harness import SweepConfig, aggregate_curves, emit_report, run_sweep
from .model import FULL_DIMS, TEST_DIMS, Dims, ModelParams
from .molgraph import Conformer, LabeledExample, MoleculeGraph, make_synthetic_dataset
from .training import Checkpoint, TrainConfig, fit, load_checkpoint, save_checkpoint

__all__ = [
    "ClueConfig", "ClueTrajectory", "clue_objective", "clue_optimize", "rank_worst",
    "SweepConfig", "aggregate_curves", "emit_report", "run_sweep",
    "FULL_DIMS", "TEST_DIMS", "Dims", "ModelParams",
    "Conformer", "LabeledExample", "MoleculeGraph", "make_synthetic_dataset",
    "Checkpoint", "TrainConfig", "fit", "load_checkpoint", "save_checkpoint",
]
