"""Conditional spatiotemporal mesh VAE for cardiac surface sequences, with a
procedural toy population and the evaluation stack around it."""

__version__ = "0.1.0"

from .mesh import (CardiacMesh, ClinicalConditions, MeshSequence, PhenotypeSet,  # noqa: E402
                   closed_surface_volume, extract_phenotypes)
from .model import MeshVAE, ModelConfig, build_model, load_checkpoint, save_checkpoint  # noqa: E402
from .toy import Dataset, ToyGeneratorParams, synth_population, synth_subject  # noqa: E402
from .training import TrainConfig, evaluate_loss, train  # noqa: E402

__all__ = [
    "CardiacMesh", "ClinicalConditions", "MeshSequence", "PhenotypeSet", "closed_surface_volume",
    "extract_phenotypes", "MeshVAE", "ModelConfig", "build_model", "load_checkpoint",
    "save_checkpoint", "Dataset", "ToyGeneratorParams", "synth_population", "synth_subject",
    "TrainConfig", "evaluate_loss", "train",
]
