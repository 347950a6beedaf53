"""Token-level policies: the agent abstraction and in-process toy
implementations that allow exact computation.

All toy agents expose complete next-token distributions, so oracle code
(exact DP, trajectory enumeration, exact KL) never needs approximations.
Remote agents (module remote) implement the same contract with truncated
reports plus an explicit tail mass.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import (State, TokenId, Trajectory, Vocab, derive_seed,
                   stable_digest)
from .errors import (CapabilityError, ConfigError, ContractViolation,
                     EnumerabilityError, SupportViolationError,
                     TableLookupError)
from .serialize import canon_dumps

log = logging.getLogger(__name__)

ENUMERATION_GUARD = 10**6  # max trajectory-space size for exact methods


@dataclass(frozen=True)
class TokenDistribution:
    """Next-token probabilities: listed entries plus an aggregated tail.

    entries are sorted by descending probability (ties by ascending token
    id); `complete` means the entries cover the full distribution and
    tail_mass is exactly zero.
    """

    entries: tuple[tuple[TokenId, float], ...]
    tail_mass: float
    complete: bool

    def __post_init__(self) -> None:
        seen = set()
        total = 0.0
        for tok, p in self.entries:
            if tok in seen:
                raise ConfigError(f"duplicate token {tok} in distribution")
            seen.add(tok)
            if not (-1e-12 <= p <= 1 + 1e-9):
                raise ConfigError(f"probability {p} for token {tok} outside [0, 1]")
            total += p
        if self.tail_mass < -1e-12:
            raise ConfigError(f"tail mass {self.tail_mass} negative")
        if abs(total + self.tail_mass - 1.0) > 1e-9:
            raise ConfigError(
                f"distribution sums to {total + self.tail_mass}, expected 1 within 1e-9")
        if self.complete and self.tail_mass != 0.0:
            raise ConfigError("complete distribution must have zero tail mass")

    @classmethod
    def from_probs(cls, probs: dict[TokenId, float] | list[float],
                   want_top: int | None = None) -> "TokenDistribution":
        """Build from a full mapping/array; optionally truncate to the top
        `want_top` tokens, folding the rest into tail_mass."""
        if isinstance(probs, dict):
            items = [(int(t), float(p)) for t, p in probs.items()]
        else:
            items = [(t, float(p)) for t, p in enumerate(probs)]
        items.sort(key=lambda e: (-e[1], e[0]))
        if want_top is None or want_top >= len(items):
            return cls(entries=tuple(items), tail_mass=0.0, complete=True)
        kept = items[:want_top]
        tail = sum(p for _, p in items[want_top:])
        return cls(entries=tuple(kept), tail_mass=tail, complete=False)

    def truncated(self, k: int) -> "TokenDistribution":
        if k >= len(self.entries):
            return self
        tail = self.tail_mass + sum(p for _, p in self.entries[k:])
        return TokenDistribution(entries=self.entries[:k], tail_mass=tail,
                                 complete=False)

    def as_dict(self) -> dict[TokenId, float]:
        return dict(self.entries)


@lru_cache(maxsize=8192)
def _sampling_arrays(dist: TokenDistribution) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([t for t, _ in dist.entries], dtype=np.int64)
    cum = np.cumsum(np.array([p for _, p in dist.entries], dtype=np.float64))
    return ids, cum


def sample_token(dist: TokenDistribution, rng: np.random.Generator) -> TokenId:
    """Draw one token from a complete distribution."""
    if not dist.complete:
        raise CapabilityError("sampling requires a complete distribution")
    ids, cum = _sampling_arrays(dist)
    u = rng.random() * cum[-1]
    return int(ids[min(np.searchsorted(cum, u, side="right"), len(ids) - 1)])


class AgentPolicy(ABC):
    """A token-level policy π: next-token distributions, continuation
    sampling, and a stable identity.

    Implementations must be safe for concurrent read-only queries; all
    sampling takes an explicit seed so scheduling never affects results.
    """

    vocab: Vocab
    exact_capable: bool = True  # complete distributions cheaply available

    @property
    @abstractmethod
    def name(self) -> str: ...

    @property
    @abstractmethod
    def agent_id(self) -> str: ...

    @abstractmethod
    def distribution(self, state: State, want_top: int | None = None) -> TokenDistribution:
        """Next-token distribution at a non-terminal state.  want_top=None
        requests the fullest report the agent can produce."""

    def rollouts(self, state: State, z: TokenId, n: int, max_len: int,
                 seed: int) -> list[Trajectory]:
        """Sample n continuations of [state, z]; see sample_rollouts."""
        out = []
        for i in range(n):
            rng = np.random.default_rng(derive_seed(seed, i))
            tokens, logprob = sample_continuation(
                self, state.prompt, state.generated + (z,), max_len, rng)
            out.append(Trajectory(tokens=tokens,
                                  logprob_under={self.agent_id: logprob}))
        return out


def sample_continuation(policy: AgentPolicy, prompt: tuple[TokenId, ...],
                        generated: tuple[TokenId, ...], max_len: int,
                        rng: np.random.Generator,
                        temperature: float = 1.0) -> tuple[tuple[TokenId, ...], float]:
    """Autoregressively continue `generated` until EOS or max_len new
    tokens.  Returns (continuation, its total log-probability).

    This single sampler is shared by the generic AgentPolicy.rollouts and
    the bundled mock server, so a remote agent backed by the mock is
    bit-identical to the underlying toy policy.
    """
    vocab = policy.vocab
    cont: list[TokenId] = []
    logprob = 0.0
    cur = generated
    while not (cur and cur[-1] == vocab.eos_id) and len(cont) < max_len:
        dist = policy.distribution(State(vocab, prompt, cur, False), None)
        if temperature != 1.0:
            dist = _apply_temperature(dist, temperature)
        tok = sample_token(dist, rng)
        p = dist.as_dict()[tok]
        logprob += math.log(p)
        cont.append(tok)
        cur = cur + (tok,)
    return tuple(cont), logprob


def _apply_temperature(dist: TokenDistribution, temperature: float) -> TokenDistribution:
    if temperature < 0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0.0:
        best = dist.entries[0][0]  # entries sorted desc, ties asc id
        return TokenDistribution.from_probs({best: 1.0})
    scaled = {t: p ** (1.0 / temperature) for t, p in dist.entries if p > 0}
    total = sum(scaled.values())
    return TokenDistribution.from_probs({t: v / total for t, v in scaled.items()})


@dataclass(frozen=True)
class AgentPool:
    """Ordered set of agents plus the designated reference policy."""

    agents: tuple[AgentPolicy, ...]
    ref: AgentPolicy

    def __post_init__(self) -> None:
        if not self.agents:
            raise ConfigError("agent pool must contain at least one agent")
        v0 = self.agents[0].vocab
        for a in (*self.agents, self.ref):
            if a.vocab.size != v0.size or a.vocab.eos_id != v0.eos_id:
                raise ConfigError(
                    f"agent {a.name!r} vocab (size={a.vocab.size}, eos={a.vocab.eos_id}) "
                    f"differs from pool vocab (size={v0.size}, eos={v0.eos_id})")

    @property
    def vocab(self) -> Vocab:
        return self.agents[0].vocab

    @classmethod
    def build(cls, agents: list[AgentPolicy] | tuple[AgentPolicy, ...],
              ref_agent: int | str = 0) -> "AgentPool":
        agents = tuple(agents)
        if ref_agent == "uniform":
            if not agents:
                raise ConfigError("agent pool must contain at least one agent")
            return cls(agents=agents, ref=UniformPolicy(agents[0].vocab))
        if not isinstance(ref_agent, int) or not (0 <= ref_agent < len(agents)):
            raise ConfigError(f"ref_agent {ref_agent!r} not a valid index for "
                              f"{len(agents)} agents")
        return cls(agents=agents, ref=agents[ref_agent])


class UniformPolicy(AgentPolicy):
    """Uniform distribution over the vocabulary; the 'uninformed' reference."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        self._row = TokenDistribution.from_probs(
            [1.0 / vocab.size] * vocab.size)

    @property
    def name(self) -> str:
        return "uniform"

    @property
    def agent_id(self) -> str:
        return f"uniform-{self.vocab.size}-{self.vocab.eos_id}"

    def distribution(self, state: State, want_top: int | None = None) -> TokenDistribution:
        return self._row


class TabularPolicy(AgentPolicy):
    """Explicit conditional table keyed by the conditioning context
    (prompt + generated prefix).  Every row is complete."""

    def __init__(self, vocab: Vocab, rows: dict[tuple[TokenId, ...], dict[TokenId, float]],
                 name: str = "tabular"):
        self.vocab = vocab
        self._name = name
        self._rows: dict[tuple[TokenId, ...], TokenDistribution] = {}
        for ctx, row in rows.items():
            ctx = tuple(int(t) for t in ctx)
            dist = row if isinstance(row, TokenDistribution) else \
                TokenDistribution.from_probs({int(t): float(p) for t, p in row.items()})
            if not dist.complete:
                raise ConfigError(f"tabular row for context {ctx} is not complete")
            self._rows[ctx] = dist
        payload = canon_dumps({
            " ".join(map(str, ctx)): [[t, p] for t, p in sorted(dist.entries)]
            for ctx, dist in sorted(self._rows.items())})
        self._id = "tab-" + stable_digest(payload.encode())

    @property
    def name(self) -> str:
        return self._name

    @property
    def agent_id(self) -> str:
        return self._id

    def distribution(self, state: State, want_top: int | None = None) -> TokenDistribution:
        ctx = state.context
        if ctx not in self._rows:
            raise TableLookupError(
                f"tabular policy {self.name!r} has no row for context {ctx}")
        return self._rows[ctx]


class NGramPolicy(AgentPolicy):
    """Order-n count model with add-λ smoothing (λ > 0 ⇒ full support)."""

    def __init__(self, vocab: Vocab, n: int,
                 counts: dict[tuple[TokenId, ...], dict[TokenId, int]],
                 lam: float = 1.0, name: str = "ngram"):
        if n < 1:
            raise ConfigError(f"n-gram order must be >= 1, got {n}")
        if lam <= 0:
            raise ConfigError(f"smoothing lambda must be > 0, got {lam}")
        self.vocab = vocab
        self.n = n
        self.lam = float(lam)
        self._name = name
        self._counts = {tuple(int(t) for t in ctx): {int(z): int(c) for z, c in row.items()}
                        for ctx, row in counts.items()}
        payload = canon_dumps({
            "n": n, "lam": self.lam,
            "counts": {" ".join(map(str, ctx)): sorted(row.items())
                       for ctx, row in sorted(self._counts.items())}})
        self._id = "ngram-" + stable_digest(payload.encode())

    @classmethod
    def fit(cls, vocab: Vocab, n: int, corpus: list[list[TokenId]],
            lam: float = 1.0, name: str = "ngram") -> "NGramPolicy":
        counts: dict[tuple[TokenId, ...], dict[TokenId, int]] = {}
        for seq in corpus:
            seq = [vocab.check_token(t) for t in seq]
            for t in range(len(seq)):
                ctx = tuple(seq[max(0, t - n + 1):t])
                row = counts.setdefault(ctx, {})
                row[seq[t]] = row.get(seq[t], 0) + 1
        return cls(vocab, n, counts, lam=lam, name=name)

    @property
    def name(self) -> str:
        return self._name

    @property
    def agent_id(self) -> str:
        return self._id

    def distribution(self, state: State, want_top: int | None = None) -> TokenDistribution:
        context = state.context
        ctx = context[max(0, len(context) - (self.n - 1)):] if self.n > 1 else ()
        row = self._counts.get(tuple(ctx), {})
        total = sum(row.values())
        denom = total + self.lam * self.vocab.size
        probs = {z: (row.get(z, 0) + self.lam) / denom for z in range(self.vocab.size)}
        return TokenDistribution.from_probs(probs)


def enumerate_leaves(base: AgentPolicy, prompt: tuple[TokenId, ...],
                     horizon: int) -> dict[tuple[TokenId, ...], float]:
    """All complete continuations from `prompt` under `base`, with their
    probabilities.  A leaf ends with EOS or has exactly `horizon` tokens.

    Guarded: raises if the trajectory space exceeds the enumeration limit.
    """
    vocab = base.vocab
    if vocab.size ** horizon > ENUMERATION_GUARD:
        raise EnumerabilityError(
            f"|V|^T = {vocab.size}^{horizon} exceeds {ENUMERATION_GUARD}")
    leaves: dict[tuple[TokenId, ...], float] = {}
    stack: list[tuple[tuple[TokenId, ...], float]] = [((), 1.0)]
    while stack:
        gen, prob = stack.pop()
        if (gen and gen[-1] == vocab.eos_id) or len(gen) == horizon:
            leaves[gen] = leaves.get(gen, 0.0) + prob
            continue
        row = base.distribution(State(vocab, prompt, gen, False), None)
        if not row.complete:
            raise CapabilityError(
                f"leaf enumeration requires complete rows (agent {base.name!r})")
        for z, p in sorted(row.entries):
            if p > 0.0:
                stack.append((gen + (z,), prob * p))
    return leaves


def prefix_masses(leaves: dict[tuple[TokenId, ...], float]) -> dict[tuple[TokenId, ...], float]:
    """Total mass under every prefix of the given leaf map."""
    masses: dict[tuple[TokenId, ...], float] = {}
    for leaf, w in sorted(leaves.items()):
        for i in range(len(leaf) + 1):
            pre = leaf[:i]
            masses[pre] = masses.get(pre, 0.0) + w
    return masses


class GibbsTiltedPolicy(AgentPolicy):
    """The closed-form optimum of β-KL-regularized alignment: a trajectory
    distribution ρ(τ) ∝ ρ_base(τ)·exp(r(τ)/β), exposed as a token-level
    policy by exact marginalization over the enumerable trajectory space.
    """

    def __init__(self, base: AgentPolicy, reward, beta: float,
                 prompt: tuple[TokenId, ...], horizon: int,
                 name: str | None = None):
        if beta <= 0:
            raise ConfigError(f"beta must be > 0, got {beta}")
        self.vocab = base.vocab
        self.base = base
        self.reward = reward
        self.beta = float(beta)
        self.prompt = tuple(prompt)
        self.horizon = int(horizon)
        self._name = name or f"gibbs({reward.name}/{beta:g})"

        self.ref_leaves = enumerate_leaves(base, self.prompt, self.horizon)
        self._w = {leaf: p * math.exp(reward.score(self.prompt, leaf) / self.beta)
                   for leaf, p in self.ref_leaves.items()}
        self.partition = sum(self._w[leaf] for leaf in sorted(self._w))
        self.log_partition = math.log(self.partition)
        self.leaf_masses = {leaf: w / self.partition for leaf, w in self._w.items()}
        self.ref_prefix = prefix_masses(self.ref_leaves)
        self.tilt_prefix = prefix_masses(self._w)
        self._id = "gibbs-" + stable_digest(canon_dumps({
            "base": base.agent_id, "reward": reward.reward_id,
            "beta": self.beta, "prompt": list(self.prompt),
            "horizon": self.horizon}).encode())

    @property
    def name(self) -> str:
        return self._name

    @property
    def agent_id(self) -> str:
        return self._id

    def distribution(self, state: State, want_top: int | None = None) -> TokenDistribution:
        if state.prompt != self.prompt:
            raise ContractViolation(
                f"gibbs policy is tied to prompt {self.prompt}, got {state.prompt}")
        pre = state.generated
        if pre not in self.tilt_prefix:
            raise TableLookupError(f"prefix {pre} outside the enumerated tree")
        child_mass = {z: self.tilt_prefix.get(pre + (z,), 0.0)
                      for z in range(self.vocab.size)}
        total = sum(child_mass.values())
        if total <= 0.0:
            raise TableLookupError(f"prefix {pre} is terminal in the enumerated tree")
        return TokenDistribution.from_probs({z: m / total for z, m in child_mass.items()})

    def conditional_leaves(self, prefix: tuple[TokenId, ...]) -> dict[tuple[TokenId, ...], float]:
        """Tilted trajectory distribution conditioned on a prefix."""
        mass = self.tilt_prefix.get(tuple(prefix))
        if mass is None or mass <= 0.0:
            raise TableLookupError(f"prefix {tuple(prefix)} outside the enumerated tree")
        return {leaf: w / mass for leaf, w in self._w.items()
                if leaf[:len(prefix)] == tuple(prefix)}

    def conditional_log_partition(self, prefix: tuple[TokenId, ...]) -> float:
        """ln Z(prefix) for the conditional Gibbs identity:
        KL(ρ(·|prefix) ‖ ρ_base(·|prefix)) = E_cond[r]/β − ln Z(prefix)."""
        prefix = tuple(prefix)
        return math.log(self.tilt_prefix[prefix]) - math.log(self.ref_prefix[prefix])


# --- module operations ---

def next_distribution(agent: AgentPolicy, state: State,
                      want_top: int | None = None) -> TokenDistribution:
    """The agent's next-token report at a non-terminal state, truncated to
    `want_top` entries when requested (tail mass aggregated)."""
    if state.terminal:
        raise ContractViolation(
            f"next_distribution on a terminal state (generated={state.generated})")
    dist = agent.distribution(state, want_top)
    if want_top is not None and len(dist.entries) > want_top:
        dist = dist.truncated(want_top)
    return dist


def top_k_candidates(agent: AgentPolicy, state: State, k: int) -> list[TokenId]:
    """The agent's k highest-probability tokens (fewer near small vocabs);
    zero-probability tokens are never candidates."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    dist = next_distribution(agent, state, k)
    return [z for z, p in dist.entries if p > 0.0]


def sample_rollouts(agent: AgentPolicy, state: State, z: TokenId, n: int,
                    max_len: int, seed: int) -> list[Trajectory]:
    """n continuations of [state, z], each ended by EOS or max_len tokens.
    Bit-reproducible given (seed, n, max_len, agent)."""
    if state.terminal:
        raise ContractViolation("cannot roll out from a terminal state")
    if n < 1:
        raise ConfigError(f"rollout count must be >= 1, got {n}")
    if max_len < 0:
        raise ConfigError(f"max_len must be >= 0, got {max_len}")
    agent.vocab.check_token(z)
    return agent.rollouts(state, z, n, max_len, seed)


def token_kl(p: TokenDistribution, q: TokenDistribution) -> float:
    """KL(p ‖ q) in nats.

    Complete distributions are compared exactly.  Truncated reports are
    compared on the intersection of listed tokens, with everything else on
    each side (unlisted entries plus the explicit tail) lumped into one
    residual bucket per side — a deterministic, documented coarsening.
    """
    if p.complete and q.complete:
        qd = q.as_dict()
        total = 0.0
        for z, pz in p.entries:
            if pz <= 0.0:
                continue
            qz = qd.get(z, 0.0)
            if qz <= 0.0:
                raise SupportViolationError(z)
            total += pz * math.log(pz / qz)
        return max(0.0, total)

    pd, qd = p.as_dict(), q.as_dict()
    common = sorted(set(pd) & set(qd))
    p_res = p.tail_mass + sum(pv for t, pv in pd.items() if t not in qd)
    q_res = q.tail_mass + sum(qv for t, qv in qd.items() if t not in pd)
    total = 0.0
    for z in common:
        pz = pd[z]
        if pz <= 0.0:
            continue
        qz = qd[z]
        if qz <= 0.0:
            raise SupportViolationError(z)
        total += pz * math.log(pz / qz)
    if p_res > 1e-12:
        if q_res <= 0.0:
            raise SupportViolationError("tail")
        total += p_res * math.log(p_res / q_res)
    return max(0.0, total)
