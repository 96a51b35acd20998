"""Pooling multi-site tabular datasets with covariate-equivariant,
site-invariant latent representations."""

__version__ = "0.1.0"

from .liegroup import (LatentPoint, Rotation, SkewCoords, act, cayley,
                       expm_so, group_elem, orbit_tau, skew_coords, skew_embed)
from .nn import Adam, MlpSpec, Mlp, ModelBundle
from .pipeline import TrainConfig, run_experiment, run_training

__all__ = [
    "LatentPoint", "Rotation", "SkewCoords", "act", "cayley", "expm_so",
    "group_elem", "orbit_tau", "skew_coords", "skew_embed",
    "Adam", "MlpSpec", "Mlp", "ModelBundle",
    "TrainConfig", "run_experiment", "run_training",
]
