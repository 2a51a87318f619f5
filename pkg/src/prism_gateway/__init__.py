"""Model-accessibility gateway: stateless calls to sandboxed model workers.

Kept import-light on purpose — worker plugins import this package at every
spawn, so nothing here may pull in heavy dependencies.
"""

__version__ = "0.1.0"

from .errors import PrismError

__all__ = ["PrismError", "__version__"]
