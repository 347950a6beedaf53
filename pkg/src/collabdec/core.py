"""Vocabulary, state, trajectory, and configuration types shared by all
other modules.

States are immutable values: the decoding MDP's state is the prompt plus
the generated prefix, and the transition is concatenation.  Terminality is
part of the state (EOS emitted or horizon reached) so downstream code never
re-derives it inconsistently.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Literal

from .errors import ConfigError, ContractViolation

TokenId = int

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Vocab:
    """A token alphabet of `size` ids, one of which is the EOS marker.

    `labels`, when given, is display-only (one human-readable string per
    token id, used by the harness's whitespace-text prompt mode).
    """

    size: int
    eos_id: TokenId
    labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ConfigError(f"vocab size must be >= 2, got {self.size}")
        if not (0 <= self.eos_id < self.size):
            raise ConfigError(f"eos_id {self.eos_id} outside [0, {self.size})")
        if self.labels is not None:
            if len(self.labels) != self.size:
                raise ConfigError(
                    f"labels has {len(self.labels)} entries for vocab of size {self.size}")
            if len(set(self.labels)) != self.size:
                raise ConfigError("labels must be distinct")

    def check_token(self, z: TokenId) -> TokenId:
        if not (0 <= z < self.size):
            raise ContractViolation(f"token {z} outside vocab [0, {self.size})")
        return z

    def check_tokens(self, tokens) -> tuple[TokenId, ...]:
        return tuple(self.check_token(z) for z in tokens)


@dataclass(frozen=True)
class State:
    """MDP state: prompt tokens plus the generated prefix.

    Hashable and comparable, so the exact-DP oracle can key memo tables on
    states directly.
    """

    vocab: Vocab
    prompt: tuple[TokenId, ...]
    generated: tuple[TokenId, ...]
    terminal: bool

    @property
    def context(self) -> tuple[TokenId, ...]:
        """Prompt plus generated prefix, the conditioning context."""
        return self.prompt + self.generated


@dataclass(frozen=True)
class Trajectory:
    """A completed continuation τ: tokens sampled after some (state, z).

    Empty only when the start was already terminal (z = EOS); otherwise the
    continuation ends with EOS or at the length cap it was sampled under.
    `logprob_under` optionally maps agent ids to the continuation's total
    log-probability under that agent.
    """

    tokens: tuple[TokenId, ...]
    logprob_under: dict[str, float] | None = None


@dataclass(frozen=True)
class DecoderConfig:
    """Decoding hyper-parameters.

    alpha weighs the token-level KL penalty in the switching objective;
    beta weighs the trajectory-level KL (bound verification only); top_k is
    the per-agent candidate count; tie_break is fixed (lower agent index,
    then lower token id, at absolute J tolerance 1e-12) so traces are
    reproducible.
    """

    alpha: float = 1.0
    beta: float = 1.0
    top_k: int = 10
    max_new_tokens: int = 64
    ref_agent: int | Literal["uniform"] = 0
    seed: int = 0
    tie_break: Literal["lower_agent_then_token"] = "lower_agent_then_token"
    q_estimator: Literal["auto", "mc", "prefix_proxy", "exact_dp"] = "auto"

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.tie_break != "lower_agent_then_token":
            raise ConfigError(f"unknown tie_break policy {self.tie_break!r}")
        if self.q_estimator not in ("auto", "mc", "prefix_proxy", "exact_dp"):
            raise ConfigError(f"unknown q_estimator {self.q_estimator!r}")
        if isinstance(self.ref_agent, int):
            if self.ref_agent < 0:
                raise ConfigError(f"ref_agent index must be >= 0, got {self.ref_agent}")
        elif self.ref_agent != "uniform":
            raise ConfigError(f"ref_agent must be an agent index or 'uniform'")

    def with_(self, **kw) -> "DecoderConfig":
        return replace(self, **kw)


def _terminality(vocab: Vocab, generated: tuple[TokenId, ...], horizon: int) -> bool:
    if len(generated) > horizon:
        raise ContractViolation(
            f"generated length {len(generated)} exceeds horizon {horizon}")
    if generated and generated[-1] == vocab.eos_id:
        return True
    return len(generated) == horizon


def initial_state(vocab: Vocab, prompt, config: DecoderConfig,
                  generated=()) -> State:
    """Build a State, deriving `terminal` from the config's horizon."""
    prompt_t = vocab.check_tokens(prompt)
    gen_t = vocab.check_tokens(generated)
    # EOS inside the prefix (not at the end) would have stopped decoding.
    for tok in gen_t[:-1]:
        if tok == vocab.eos_id:
            raise ContractViolation("EOS appears before the end of `generated`")
    return State(vocab=vocab, prompt=prompt_t, generated=gen_t,
                 terminal=_terminality(vocab, gen_t, config.max_new_tokens))


def append_token(state: State, z: TokenId, config: DecoderConfig) -> State:
    """Deterministic transition: concatenate z onto the generated prefix.

    Appending to a terminal state is a contract violation, not a no-op.
    """
    if state.terminal:
        raise ContractViolation(
            f"cannot append token {z} to a terminal state (generated={state.generated})")
    state.vocab.check_token(z)
    gen = state.generated + (z,)
    return State(vocab=state.vocab, prompt=state.prompt, generated=gen,
                 terminal=_terminality(state.vocab, gen, config.max_new_tokens))


def is_terminal(state: State, config: DecoderConfig) -> bool:
    """True iff EOS was emitted or the generated length reached the horizon."""
    if state.generated and state.generated[-1] == state.vocab.eos_id:
        return True
    return len(state.generated) >= config.max_new_tokens


def derive_seed(*parts: int | str) -> int:
    """Mix an arbitrary tuple of ints/strings into a stable 63-bit seed.

    splitmix64 finalizer per part; strings enter through blake2b.  Never
    uses Python's salted hash(), so derived seeds are stable across
    processes and platforms.
    """
    x = _SPLITMIX_GAMMA
    for part in parts:
        if isinstance(part, str):
            p = int.from_bytes(hashlib.blake2b(part.encode(), digest_size=8).digest(), "big")
        else:
            p = int(part) & _MASK64
        x = (x + p + _SPLITMIX_GAMMA) & _MASK64
        x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
        x = x ^ (x >> 31)
    return x >> 1  # 63 bits, safe for any RNG seed parameter


def stable_digest(payload: bytes) -> str:
    """Short content hash used for deterministic identities."""
    return hashlib.sha256(payload).hexdigest()[:16]


__all__ = [
    "TokenId", "Vocab", "State", "Trajectory", "DecoderConfig",
    "initial_state", "append_token", "is_terminal",
    "derive_seed", "stable_digest",
]
