"""Spatio-temporal probabilistic transformer: a channel x time-patch CRF whose
forward pass is mean-field inference, with graph priors, condition-generated
factors, and latent autoregressive rollout."""

from .graph import STPT, BeliefState, FactorBank, ModelConfig
from .priors import PriorSet, PriorSpec
from .tensor import Tensor

__all__ = ["STPT", "BeliefState", "FactorBank", "ModelConfig", "PriorSet", "PriorSpec", "Tensor"]
__version__ = "0.1.0"
