"""Monte Carlo, policy-gradient and actor-critic pricing of multi-asset passport options."""
from .errors import PassportError

__version__ = "0.1.0"

__all__ = ["PassportError", "__version__"]
