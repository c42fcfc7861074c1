"""Guidance sidecar: serves diffusion generate/score over HTTP+JSON.

The wire surface is image-space; any latent geometry stays private to
the engine behind it. See README.md for the contract and the mapping
from latent noise predictions back to image-shaped responses.
"""

from .app import create_app
from .config import ServerConfig

__all__ = ["ServerConfig", "create_app"]
__version__ = "0.1.0"
