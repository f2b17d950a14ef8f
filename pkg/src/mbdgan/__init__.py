"""GAN image translation with a multi-branch discriminator, built on a small numpy autodiff engine."""

from .audit import ParamAudit, audit_branch_scaling, count_parameters
from .autodiff import ConfigurationError, Tape, Tensor, backward, grad_check
from .evaluation import ISReport, inception_score
from .losses import LossReport, adv_loss, cls_loss, cycle_loss
from .networks import (Generator, GeneratorSpec, MultiBranchDiscriminator, MultiBranchDiscriminatorSpec,
                       build_discriminator, build_generator)
from .training import GAN, TrainConfig, TrainState, train_loop, train_step

__all__ = [
    "ConfigurationError", "GAN", "Generator", "GeneratorSpec", "ISReport", "LossReport", "MultiBranchDiscriminator",
    "MultiBranchDiscriminatorSpec", "ParamAudit", "Tape", "Tensor", "TrainConfig", "TrainState", "adv_loss",
    "audit_branch_scaling", "backward", "build_discriminator", "build_generator", "cls_loss", "count_parameters",
    "cycle_loss", "grad_check", "inception_score", "train_loop", "train_step",
]
