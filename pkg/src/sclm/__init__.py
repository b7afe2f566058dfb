"""Low-light enhancement with a single fused 3x3 convolution and a quadratic gain curve."""

from .glle import (
    BranchModel,
    FusedModel,
    Topology,
    build_topology,
    estimate_illumination,
    retinex_divide,
)
from .local_adapt import CurveParams, enhance
from .reparam import collapse
from .tensor import BNParams, ConvKernel

__all__ = [
    "BNParams",
    "BranchModel",
    "ConvKernel",
    "CurveParams",
    "FusedModel",
    "Topology",
    "build_topology",
    "collapse",
    "enhance",
    "estimate_illumination",
    "retinex_divide",
]

__version__ = "0.1.0"
