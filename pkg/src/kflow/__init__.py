"""Modified mean curvature flow of Killing graphs over geodesic balls of
rotationally symmetric warped products ``M x_rho R``."""
from .errors import (DomainError, FlowDiverged, KflowError, NumericalError, ParameterError,
                     PreconditionError)
from .grids import PolarGrid, RadialGrid
from .model import WarpedModel, builtin, custom, euclidean, hyperbolic, hyperbolic_product

__version__ = "0.1.0"

__all__ = [
    "DomainError", "FlowDiverged", "KflowError", "NumericalError", "ParameterError",
    "PreconditionError", "PolarGrid", "RadialGrid", "WarpedModel", "builtin", "custom",
    "euclidean", "hyperbolic", "hyperbolic_product",
]
