"""Registration-derived spatial correspondences for contrastive pretraining on 3D volumes."""
from .errors import ConfigError, DataError, NumericalError, SpadeError

__version__ = "0.1.0"
__all__ = ["ConfigError", "DataError", "NumericalError", "SpadeError", "__version__"]
