"""Exception hierarchy shared across the engine.

Every error raised by this package derives from :class:`CollabError` so
callers can catch one base type at the CLI boundary and map it to an exit
code.
"""

from __future__ import annotations


class CollabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CollabError):
    """Invalid configuration, parameters, or CLI usage."""


class ContractViolation(CollabError):
    """A caller broke a documented precondition (e.g. extending a terminal
    state)."""


class CapabilityError(CollabError):
    """An operation was requested that the target object declares
    unsupported (e.g. prefix scoring on a trajectory-only reward)."""


class SupportViolationError(CollabError):
    """KL divergence is undefined: p puts mass where q has none.

    ``token`` names the offending token id, or the string ``"tail"`` when
    the violation sits in the residual bucket of a truncated distribution.
    """

    def __init__(self, token: int | str, message: str | None = None):
        self.token = token
        super().__init__(message or f"KL support violation at token {token!r}: "
                                    f"p > 0 where q = 0")


class EnumerabilityError(CollabError):
    """The trajectory space is too large for exact enumeration."""


class TableLookupError(CollabError):
    """A tabular policy or reward was queried outside its domain."""


class BackendError(CollabError):
    """A model backend (local or remote) failed; carries the agent/model
    identity when known."""

    def __init__(self, message: str, *, identity: str | None = None):
        self.identity = identity
        super().__init__(f"{message}" + (f" [backend: {identity}]" if identity else ""))


class VerificationError(CollabError):
    """A certified bound or a golden comparison was violated."""


# --- wire-protocol errors (module remote) ---

class RemoteError(BackendError):
    """Base for wire-protocol client errors."""


class NetworkError(RemoteError):
    """Transport failure that survived the retry schedule."""

    def __init__(self, message: str, *, attempts: int, identity: str | None = None):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempts)", identity=identity)


class HttpStatusError(RemoteError):
    """Server answered with a non-success HTTP status."""

    def __init__(self, message: str, *, status: int, identity: str | None = None):
        self.status = status
        super().__init__(message, identity=identity)


class VersionMismatchError(RemoteError):
    """Server speaks a protocol version outside the client's supported set."""


class MalformedResponseError(RemoteError):
    """Response body failed to parse or is missing required fields."""


class ProtocolConformanceError(RemoteError):
    """Server responded syntactically but violated a protocol contract."""


class NormalizationError(ProtocolConformanceError):
    """Reported token probabilities plus tail deviate from 1 beyond 1e-6."""


class RewardBoundsError(ProtocolConformanceError):
    """Server returned a reward outside its declared bounds."""


class RolloutContractError(ProtocolConformanceError):
    """A continuation violated the rollout contract (over-length,
    out-of-vocabulary token, or seed-determinism failure)."""
