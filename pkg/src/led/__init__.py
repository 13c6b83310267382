"""Variational autoencoders with learnable flow priors and flow posteriors."""

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    LedError,
    NonFiniteLossError,
    ParseError,
)
from .estimators import ConditionalCDFTransformer, FlowDensityEstimator, LedVAE
from .flows import BaseDensity, CouplingLayer, FlowChain, build_coupling_chain
from .made import IafLayer, MadeConditioner, build_iaf_chain, build_made_masks
from .vae import LedVae, build_led_vae, elbo_led, elbo_plain, nll_importance

__version__ = "0.1.0"

__all__ = [
    "BaseDensity", "CheckpointError", "ConditionalCDFTransformer", "ConfigError",
    "ContractError", "CouplingLayer", "DimensionError", "DomainError", "FlowChain",
    "FlowDensityEstimator", "IafLayer", "LedError", "LedVAE", "LedVae", "MadeConditioner",
    "NonFiniteLossError", "ParseError", "build_coupling_chain", "build_iaf_chain",
    "build_led_vae", "build_made_masks", "elbo_led", "elbo_plain", "nll_importance",
]
