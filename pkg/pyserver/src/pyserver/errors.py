"""Error taxonomy.

Startup problems (bad config, unloadable or inconsistent checkpoints) are
raised before the server binds a port.  Per-request problems become
structured 400 responses carrying the error kind, never bare tracebacks.
"""

from __future__ import annotations


class ServerError(Exception):
    """Base class for every error this package raises deliberately."""


class ServerConfigError(ServerError):
    """The serving configuration is invalid or self-contradictory."""


class CheckpointError(ServerError):
    """A checkpoint failed to load or violates a declared invariant."""


class RequestError(ServerError):
    """A request is outside the protocol contract; answered with HTTP 400."""


class TokenRangeError(RequestError):
    """A request carries a token id outside the served vocabulary."""


class ContextLengthError(RequestError):
    """A request's token context exceeds the model's position limit."""
