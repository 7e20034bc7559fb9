"""Generator/critic architectures, adversarial and reconstruction losses,
and the training loop in which the critic's real distribution can be either
natural images (standard) or the near-threshold-distorted manifold (ours).
"""

from .networks import CriticSpec, GeneratorSpec, build_critic, build_generator
from .losses import (
    critic_loss,
    gaussian_level_weights,
    generator_loss,
    gradient_penalty,
    interpolate_gradient_norm,
    laplacian_loss,
    perceptual_loss,
    GENERATOR_VARIANTS,
)
from .train import Checkpoint, TrainConfig, load_checkpoint, reconstruct, train

__all__ = [
    "CriticSpec",
    "GeneratorSpec",
    "build_critic",
    "build_generator",
    "critic_loss",
    "gaussian_level_weights",
    "generator_loss",
    "gradient_penalty",
    "interpolate_gradient_norm",
    "laplacian_loss",
    "perceptual_loss",
    "GENERATOR_VARIANTS",
    "Checkpoint",
    "TrainConfig",
    "load_checkpoint",
    "reconstruct",
    "train",
]
