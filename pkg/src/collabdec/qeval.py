"""Estimators of the per-agent target-reward Q-function and the implicit
J-objective.

Three estimators with one contract:

- ``mc``           Monte-Carlo over seeded rollouts (faithful to the Q
                   definition; carries a standard error).
- ``prefix_proxy`` reward scored on the partial response as if complete
                   (the cheap approximation reward-guided baselines use).
- ``exact_dp``     backward induction over the full trajectory tree; the
                   oracle every other estimator is tested against.

The J-objective subtracts the token-level KL between the agent and the
reference policy: J = Q − α·KL.  KL depends on (agent, state) only, never
on the candidate token, and callers are expected to compute it once per
agent per step.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Literal, Sequence

from .core import DecoderConfig, State, TokenId, Vocab
from .errors import CapabilityError, ConfigError, EnumerabilityError
from .policy import (ENUMERATION_GUARD, AgentPolicy, AgentPool,
                     next_distribution, sample_rollouts, token_kl)
from .reward import RewardModel, prefix_reward, trajectory_reward

QMethod = Literal["mc", "prefix_proxy", "exact_dp"]


@dataclass(frozen=True)
class QEstimate:
    """A point estimate of Q(s, z) with its uncertainty."""

    value: float
    stderr: float
    method: QMethod
    n_samples: int

    def __post_init__(self) -> None:
        if self.stderr < 0:
            raise ConfigError(f"stderr must be >= 0, got {self.stderr}")
        if self.method in ("exact_dp", "prefix_proxy") and self.stderr != 0.0:
            raise ConfigError(f"{self.method} estimates are exact; stderr must be 0")
        if self.method not in ("mc", "prefix_proxy", "exact_dp"):
            raise ConfigError(f"unknown estimator method {self.method!r}")


@dataclass(frozen=True)
class RolloutConfig:
    """Monte-Carlo settings: M rollouts per candidate, continuation length
    cap (None = remaining horizon, resolved by the caller), base seed."""

    n_rollouts: int = 32
    max_len: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_rollouts < 1:
            raise ConfigError(f"n_rollouts must be >= 1, got {self.n_rollouts}")
        if self.max_len is not None and self.max_len < 0:
            raise ConfigError(f"max_len must be >= 0, got {self.max_len}")


@dataclass(frozen=True)
class CandidateScore:
    """One (agent, token) candidate: its Q estimate, the agent's token-level
    KL at this state, and the resulting J value."""

    agent: int
    token: TokenId
    q: QEstimate
    kl: float
    j_value: float

    def __post_init__(self) -> None:
        if self.kl < 0:
            raise ConfigError(f"kl must be >= 0, got {self.kl}")
        if self.j_value > self.q.value + 1e-12:
            raise ConfigError(
                f"j_value {self.j_value} exceeds q {self.q.value} with kl >= 0")


def _resolve_max_len(state: State, cfg: RolloutConfig, horizon: int | None) -> int:
    if cfg.max_len is not None:
        return cfg.max_len
    if horizon is None:
        raise ConfigError(
            "RolloutConfig.max_len is unset and no horizon was provided")
    remaining = horizon - len(state.generated) - 1
    return max(0, remaining)


def q_mc(agent: AgentPolicy, r_target: RewardModel, state: State, z: TokenId,
         cfg: RolloutConfig, horizon: int | None = None) -> QEstimate:
    """Monte-Carlo Q: mean target reward over M seeded rollouts of
    [state, z]; stderr = sample std / √M."""
    max_len = _resolve_max_len(state, cfg, horizon)
    trajs = sample_rollouts(agent, state, z, cfg.n_rollouts, max_len, cfg.seed)
    rewards = [trajectory_reward(r_target, state.prompt,
                                 state.generated + (z,) + t.tokens)
               for t in trajs]
    m = len(rewards)
    value = math.fsum(rewards) / m
    if m > 1:
        var = math.fsum((r - value) ** 2 for r in rewards) / (m - 1)
        stderr = math.sqrt(var / m)
    else:
        stderr = 0.0
    return QEstimate(value=value, stderr=stderr, method="mc", n_samples=m)


def q_prefix_proxy(r_target: RewardModel, state: State, z: TokenId) -> QEstimate:
    """Reward-on-prefix proxy: score the partial response ending at z as if
    it were complete.  Requires the reward model's prefix capability."""
    value = prefix_reward(r_target, state.prompt, state.generated + (z,))
    return QEstimate(value=value, stderr=0.0, method="prefix_proxy", n_samples=0)


# --- exact dynamic-programming oracle ---

DPMode = Literal["agent", "pool", "optimal"]


def enumerable(vocab_size: int, remaining: int,
               guard: int = ENUMERATION_GUARD) -> bool:
    total = 1
    for _ in range(max(0, remaining)):
        total *= vocab_size
        if total > guard:
            return False
    return True


class ExactDP:
    """Backward-induction value tables over the full trajectory tree.

    mode "agent"   — Q under a fixed policy (expectation over its rows);
    mode "pool"    — at every level, the best agent's expectation (the
                     dynamic-programming optimum greedy switching chases);
    mode "optimal" — unconstrained optimum: max over tokens.
    """

    def __init__(self, agents: Sequence[AgentPolicy], mode: DPMode,
                 r_target: RewardModel, prompt: tuple[TokenId, ...],
                 horizon: int, vocab: Vocab):
        if mode in ("agent", "pool") and not agents:
            raise ConfigError("agent/pool DP modes need at least one agent")
        self.agents = tuple(agents)
        self.mode = mode
        self.r = r_target
        self.prompt = tuple(prompt)
        self.horizon = horizon
        self.vocab = vocab
        self._v: dict[tuple[TokenId, ...], float] = {}

    def _terminal(self, gen: tuple[TokenId, ...]) -> bool:
        return (len(gen) > 0 and gen[-1] == self.vocab.eos_id) or len(gen) >= self.horizon

    def q(self, gen: tuple[TokenId, ...], z: TokenId) -> float:
        """Q(s, z) for the state with generated prefix `gen`."""
        child = tuple(gen) + (z,)
        if self._terminal(child):
            return trajectory_reward(self.r, self.prompt, child)
        return self.v(child)

    def v(self, gen: tuple[TokenId, ...]) -> float:
        """Value of the non-terminal prefix `gen` under this mode."""
        gen = tuple(gen)
        cached = self._v.get(gen)
        if cached is not None:
            return cached
        if self.mode == "optimal":
            value = max(self.q(gen, z) for z in range(self.vocab.size))
        else:
            per_agent = []
            for a in self.agents:
                row = a.distribution(State(self.vocab, self.prompt, gen, False), None)
                if not row.complete:
                    raise CapabilityError(
                        f"exact DP requires complete distributions (agent {a.name!r})")
                per_agent.append(math.fsum(
                    p * self.q(gen, z) for z, p in sorted(row.entries) if p > 0.0))
            value = max(per_agent) if self.mode == "pool" else per_agent[0]
        self._v[gen] = value
        return value


_dp_cache: OrderedDict[tuple, ExactDP] = OrderedDict()
_dp_lock = threading.Lock()
_DP_CACHE_CAP = 512


def get_exact_dp(agents: Sequence[AgentPolicy], mode: DPMode,
                 r_target: RewardModel, prompt: tuple[TokenId, ...],
                 horizon: int, vocab: Vocab) -> ExactDP:
    """Shared, memoized DP tables keyed by content-derived identities."""
    key = (tuple(a.agent_id for a in agents), mode, r_target.reward_id,
           tuple(prompt), horizon, vocab.size, vocab.eos_id)
    with _dp_lock:
        dp = _dp_cache.get(key)
        if dp is not None:
            _dp_cache.move_to_end(key)
            return dp
    dp = ExactDP(agents, mode, r_target, prompt, horizon, vocab)
    with _dp_lock:
        _dp_cache[key] = dp
        while len(_dp_cache) > _DP_CACHE_CAP:
            _dp_cache.popitem(last=False)
    return dp


def q_exact_dp(agent_or_pool: AgentPolicy | AgentPool | Sequence[AgentPolicy],
               r_target: RewardModel, state: State, z: TokenId,
               horizon: int) -> QEstimate:
    """Exact Q(s, z) by backward induction.

    A single agent gives that agent's Q; a pool gives the full switching
    optimum (max over agents at every future level).
    """
    if isinstance(agent_or_pool, AgentPolicy):
        agents: tuple[AgentPolicy, ...] = (agent_or_pool,)
        mode: DPMode = "agent"
    elif isinstance(agent_or_pool, AgentPool):
        agents, mode = agent_or_pool.agents, "pool"
    else:
        agents, mode = tuple(agent_or_pool), "pool"
    vocab = agents[0].vocab
    remaining = horizon - len(state.generated) - 1
    if not enumerable(vocab.size, remaining):
        raise EnumerabilityError(
            f"|V|^remaining = {vocab.size}^{remaining} exceeds {ENUMERATION_GUARD}")
    dp = get_exact_dp(agents, mode, r_target, state.prompt, horizon, vocab)
    return QEstimate(value=dp.q(state.generated, z), stderr=0.0,
                     method="exact_dp", n_samples=0)


def implicit_j(agent: int, state: State, z: TokenId, q: QEstimate,
               pool: AgentPool, alpha: float,
               kl: float | None = None) -> CandidateScore:
    """J = Q − α·KL(π_agent(·|s) ‖ π_ref(·|s)).

    The KL term depends on (agent, state) only; pass `kl` to reuse a value
    computed once per agent per step (the decoder does).
    """
    if kl is None:
        p = next_distribution(pool.agents[agent], state, None)
        q_ref = next_distribution(pool.ref, state, None)
        kl = token_kl(p, q_ref)
    return CandidateScore(agent=agent, token=z, q=q, kl=kl,
                          j_value=q.value - alpha * kl)


def resolve_estimator(cfg: DecoderConfig, pool: AgentPool, state: State) -> QMethod:
    """Apply the `auto` rule: exact DP when every agent can serve complete
    distributions and the remaining tree is enumerable; Monte-Carlo
    otherwise."""
    if cfg.q_estimator != "auto":
        return cfg.q_estimator
    remaining = cfg.max_new_tokens - len(state.generated) - 1
    if all(a.exact_capable for a in pool.agents) and \
            enumerable(pool.vocab.size, remaining):
        return "exact_dp"
    return "mc"
