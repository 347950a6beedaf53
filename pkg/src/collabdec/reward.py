"""Target-reward abstraction and in-process toy reward models.

Rewards are trajectory-level: they score a complete response given the
prompt.  Declared bounds are mandatory — exact bound verification and
estimator tests both need a finite reward range.  Prefix scoring (scoring a
partial response as if complete) is an optional capability used by the
cheap proxy Q estimator.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

from .core import TokenId, Vocab, stable_digest
from .errors import CapabilityError, ConfigError, TableLookupError
from .serialize import canon_dumps


class RewardModel(ABC):
    """Deterministic scorer of (prompt, response) token sequences.

    `bounds` is the declared [lo, hi] range every score must respect.
    `reward_id` is a stable, content-derived identity used for caching and
    trace provenance.
    """

    bounds: tuple[float, float]
    supports_prefix: bool = False

    @property
    @abstractmethod
    def name(self) -> str: ...

    @property
    @abstractmethod
    def reward_id(self) -> str: ...

    @abstractmethod
    def score(self, prompt: tuple[TokenId, ...], response: tuple[TokenId, ...]) -> float: ...

    def prefix_score(self, prompt: tuple[TokenId, ...], partial: tuple[TokenId, ...]) -> float:
        raise CapabilityError(
            f"reward {self.name!r} does not support prefix scoring")


def _check_bounds(lo: float, hi: float) -> tuple[float, float]:
    if not (lo < hi):
        raise ConfigError(f"reward bounds must satisfy lo < hi, got [{lo}, {hi}]")
    return (float(lo), float(hi))


@dataclass(frozen=True)
class KeywordReward(RewardModel):
    """+weight per occurrence of each configured target token, clipped to
    the declared bounds.  Supports prefix scoring (counting on a partial
    response is well-defined)."""

    weights: tuple[tuple[TokenId, float], ...]
    bounds: tuple[float, float] = (0.0, 1.0)
    label: str = "keyword"
    supports_prefix: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", tuple(sorted(
            (int(t), float(w)) for t, w in dict(self.weights).items())))
        object.__setattr__(self, "bounds", _check_bounds(*self.bounds))

    @property
    def name(self) -> str:
        return self.label

    @property
    def reward_id(self) -> str:
        return "kw-" + stable_digest(canon_dumps(
            {"weights": self.weights, "bounds": self.bounds}).encode())

    def _count(self, tokens: tuple[TokenId, ...]) -> float:
        w = dict(self.weights)
        total = 0.0
        for tok in tokens:
            total += w.get(tok, 0.0)
        lo, hi = self.bounds
        return min(hi, max(lo, total))

    def score(self, prompt, response) -> float:
        return self._count(tuple(response))

    def prefix_score(self, prompt, partial) -> float:
        return self._count(tuple(partial))


@dataclass(frozen=True)
class TabularTrajectoryReward(RewardModel):
    """Explicit map from complete response to reward.

    Total over its enumerable domain by construction: querying an absent
    trajectory is an error, never a default.  Prefix scoring is
    declared unsupported (only whole trajectories are in the domain).
    """

    table: dict[tuple[TokenId, ...], float]
    bounds: tuple[float, float] = (0.0, 1.0)
    label: str = "tabular-reward"
    supports_prefix: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "table",
                           {tuple(k): float(v) for k, v in self.table.items()})
        object.__setattr__(self, "bounds", _check_bounds(*self.bounds))
        lo, hi = self.bounds
        for traj, val in self.table.items():
            if not (lo - 1e-12 <= val <= hi + 1e-12):
                raise ConfigError(
                    f"table value {val} for {traj} outside declared bounds [{lo}, {hi}]")

    @property
    def name(self) -> str:
        return self.label

    @property
    def reward_id(self) -> str:
        rows = [[list(k), v] for k, v in sorted(self.table.items())]
        return "tab-" + stable_digest(canon_dumps(
            {"table": rows, "bounds": self.bounds}).encode())

    def score(self, prompt, response) -> float:
        key = tuple(response)
        if key not in self.table:
            raise TableLookupError(
                f"trajectory {key} absent from reward table ({len(self.table)} entries)")
        return self.table[key]


@dataclass(frozen=True)
class BlendReward(RewardModel):
    """Convex combination Σ wᵢ·rᵢ of other reward models."""

    components: tuple[RewardModel, ...]
    weights: tuple[float, ...]
    label: str = "blend"

    def __post_init__(self) -> None:
        if len(self.components) != len(self.weights) or not self.components:
            raise ConfigError("blend needs matching, non-empty components and weights")
        ws = tuple(float(w) for w in self.weights)
        if any(w < 0 for w in ws):
            raise ConfigError(f"blend weights must be >= 0, got {ws}")
        if abs(sum(ws) - 1.0) > 1e-9:
            raise ConfigError(f"blend weights must sum to 1, got sum {sum(ws)}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def bounds(self) -> tuple[float, float]:  # type: ignore[override]
        lo = sum(w * c.bounds[0] for w, c in zip(self.weights, self.components))
        hi = sum(w * c.bounds[1] for w, c in zip(self.weights, self.components))
        return (lo, hi)

    @property
    def supports_prefix(self) -> bool:  # type: ignore[override]
        return all(c.supports_prefix for c in self.components)

    @property
    def name(self) -> str:
        return self.label

    @property
    def reward_id(self) -> str:
        return "blend-" + stable_digest(canon_dumps(
            {"ids": [c.reward_id for c in self.components],
             "weights": self.weights}).encode())

    def score(self, prompt, response) -> float:
        return sum(w * c.score(prompt, response)
                   for w, c in zip(self.weights, self.components))

    def prefix_score(self, prompt, partial) -> float:
        if not self.supports_prefix:
            raise CapabilityError(f"blend {self.name!r} has a trajectory-only component")
        return sum(w * c.prefix_score(prompt, partial)
                   for w, c in zip(self.weights, self.components))


def trajectory_reward(r: RewardModel, prompt, response) -> float:
    """Score a complete response; asserts the model honors its bounds."""
    value = r.score(tuple(prompt), tuple(response))
    lo, hi = r.bounds
    if not (lo - 1e-9 <= value <= hi + 1e-9):
        raise ConfigError(
            f"reward {r.name!r} returned {value} outside declared bounds [{lo}, {hi}]")
    return value


def prefix_reward(r: RewardModel, prompt, partial) -> float:
    """Score a partial response as if complete (capability-gated)."""
    if not r.supports_prefix:
        # delegate so the model can raise its own CapabilityError message
        return r.prefix_score(tuple(prompt), tuple(partial))
    value = r.prefix_score(tuple(prompt), tuple(partial))
    lo, hi = r.bounds
    if not (lo - 1e-9 <= value <= hi + 1e-9):
        raise ConfigError(
            f"reward {r.name!r} prefix-scored {value} outside bounds [{lo}, {hi}]")
    return value


def keyword_reward(vocab: Vocab, targets: dict[TokenId, float] | list[TokenId],
                   w: float = 1.0, bounds: tuple[float, float] = (0.0, 1.0),
                   name: str = "keyword") -> KeywordReward:
    """Convenience builder: uniform weight `w` for a list of target tokens."""
    if isinstance(targets, dict):
        weights = {int(t): float(v) for t, v in targets.items()}
    else:
        weights = {int(t): float(w) for t in targets}
    for t in weights:
        vocab.check_token(t)
    return KeywordReward(weights=tuple(weights.items()), bounds=bounds, label=name)
