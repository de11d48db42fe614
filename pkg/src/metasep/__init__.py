"""metasep: meta-learned one-shot adaptation for single-channel speech separation."""

from .errors import MetasepError
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "MetasepError", "__version__"]
