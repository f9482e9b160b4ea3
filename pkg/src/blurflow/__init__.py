"""Optical flow for camera-shake blurred image pairs."""

from .bench import aae, aee, generate_suite, synthesize_pair
from .deconv import DeconvConfig, deblur_iterate, estimate_kernel, nonblind_deconv
from .errors import (
    BlurFlowError,
    DegenerateInputError,
    DomainError,
    FormatError,
    NumericalBreakdownError,
    SingularityError,
)
from .featurenet import NetParams, default_params
from .flowsolve import FlowConfig, estimate_flow

__version__ = "0.1.0"

__all__ = [
    "BlurFlowError",
    "DeconvConfig",
    "DegenerateInputError",
    "DomainError",
    "FlowConfig",
    "FormatError",
    "NetParams",
    "NumericalBreakdownError",
    "SingularityError",
    "aae",
    "aee",
    "deblur_iterate",
    "default_params",
    "estimate_flow",
    "estimate_kernel",
    "generate_suite",
    "nonblind_deconv",
    "synthesize_pair",
]
