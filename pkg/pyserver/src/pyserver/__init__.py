"""Reference wire-protocol v1.0 model server over transformer checkpoints."""

__version__ = "0.1.0"

from .app import ServerHandle, app_from_config, build_app, serve
from .config import ModelSpec, ServerConfig, load_config
from .errors import (CheckpointError, ContextLengthError, RequestError,
                     ServerConfigError, ServerError, TokenRangeError)
from .models import ServedModel, make_tiny_checkpoint
from .wire import PROTOCOL_VERSION

__all__ = [
    "PROTOCOL_VERSION",
    "CheckpointError",
    "ContextLengthError",
    "ModelSpec",
    "RequestError",
    "ServedModel",
    "ServerConfig",
    "ServerConfigError",
    "ServerError",
    "ServerHandle",
    "TokenRangeError",
    "app_from_config",
    "build_app",
    "load_config",
    "make_tiny_checkpoint",
    "serve",
    "__version__",
]
