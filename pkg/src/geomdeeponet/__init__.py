"""Geom-DeepONet and vanilla DeepONet surrogates on SDF-augmented point clouds."""

from .errors import GeomDeepONetError
from .geometry import DesignParams, ShapeFamily, sdf_family
from .dataset import CaseRecord, Dataset, generate_dataset, load_dataset, save_dataset
from .model import GeomConfig, GeomDeepONet, VanillaConfig, VanillaDeepONet, load_model, save_model
from .training import TrainConfig, train, resume

__version__ = "0.1.0"

__all__ = [
    "CaseRecord", "Dataset", "DesignParams", "GeomConfig", "GeomDeepONet", "GeomDeepONetError",
    "ShapeFamily", "TrainConfig", "VanillaConfig", "VanillaDeepONet", "generate_dataset",
    "load_dataset", "load_model", "resume", "save_dataset", "save_model", "sdf_family", "train",
]
