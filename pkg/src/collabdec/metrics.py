"""Evaluation metrics for decoded outputs: average reward, normalized
reward, n-gram diversity, and prompt/response coherence.

Diversity is the product over n = 2..4 of (unique n-grams / total
n-grams); sequences shorter than 4 tokens have no 4-grams, so the metric
is reported absent (None) rather than clamped to 0.  Coherence embeds
prompt and response (default: L2-normalized token-count vectors) and maps
their cosine similarity from [-1, 1] onto [0, 1].
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .core import TokenId
from .errors import ConfigError
from .serialize import canon_csv, canon_dumps

__all__ = [
    "Embedding", "TokenCountEmbedder", "PromptRow", "MethodSummary",
    "EvalReport", "average_reward", "normalize_rewards", "diversity",
    "coherence", "build_report", "CSV_COLUMNS",
]

# column order for the per-prompt CSV; fixed so goldens are stable
CSV_COLUMNS = ["prompt_index", "method", "reward", "diversity", "coherence",
               "n_tokens"]


class Embedding(ABC):
    """Maps a token sequence to a fixed-size vector."""

    @abstractmethod
    def embed(self, tokens: tuple[TokenId, ...]) -> np.ndarray: ...


class TokenCountEmbedder(Embedding):
    """L2-normalized bag-of-tokens counts; deterministic and hermetic."""

    def __init__(self, vocab_size: int):
        if vocab_size < 1:
            raise ConfigError(f"vocab_size must be >= 1, got {vocab_size}")
        self.vocab_size = vocab_size

    def embed(self, tokens: tuple[TokenId, ...]) -> np.ndarray:
        vec = np.zeros(self.vocab_size, dtype=float)
        for z in tokens:
            if not 0 <= z < self.vocab_size:
                raise ConfigError(f"token {z} outside vocab of size {self.vocab_size}")
            vec[z] += 1.0
        norm = float(np.linalg.norm(vec))
        return vec / norm if norm > 0.0 else vec


def average_reward(rewards: list[float]) -> float:
    if not rewards:
        raise ConfigError("average_reward of an empty list")
    return math.fsum(rewards) / len(rewards)


def normalize_rewards(per_method_means: dict[str, float], anchor_method: str,
                      r_min: float) -> dict[str, float]:
    """r̃ = (r − r_min) / (r_anchor − r_min); the anchor maps to exactly 1.0."""
    if anchor_method not in per_method_means:
        raise ConfigError(f"anchor method {anchor_method!r} not among "
                          f"{sorted(per_method_means)}")
    r_anchor = per_method_means[anchor_method]
    span = r_anchor - r_min
    if span <= 0.0:
        raise ConfigError(
            f"degenerate normalization: anchor mean {r_anchor} <= r_min {r_min}")
    out: dict[str, float] = {}
    for method, r in per_method_means.items():
        out[method] = 1.0 if method == anchor_method else (r - r_min) / span
    return out


def _ngram_ratio(tokens: tuple[TokenId, ...], n: int) -> float:
    grams = [tokens[i:i + n] for i in range(len(tokens) - n + 1)]
    return len(set(grams)) / len(grams)


def diversity(tokens) -> float | None:
    """Π_{n=2..4} unique-n-gram ratio; None when fewer than 4 tokens."""
    tokens = tuple(tokens)
    if len(tokens) < 4:
        return None
    prod = 1.0
    for n in (2, 3, 4):
        prod *= _ngram_ratio(tokens, n)
    return prod


def coherence(prompt, response, embedder: Embedding) -> float | None:
    """Cosine similarity of the two embeddings mapped onto [0, 1].

    A zero vector makes the cosine undefined, reported as None; identical
    nonzero embeddings short-circuit to exactly 1.0.
    """
    prompt, response = tuple(prompt), tuple(response)
    if not prompt or not response:
        raise ConfigError("coherence requires non-empty prompt and response")
    a = embedder.embed(prompt)
    b = embedder.embed(response)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return None
    if np.array_equal(a, b):
        return 1.0
    cos = float(np.dot(a, b) / (na * nb))
    cos = max(-1.0, min(1.0, cos))
    return (cos + 1.0) / 2.0


@dataclass(frozen=True)
class PromptRow:
    """Metrics for one (prompt, method) pair."""

    prompt_index: int
    method: str
    reward: float
    diversity: float | None
    coherence: float | None
    n_tokens: int

    def to_obj(self) -> dict:
        return {"prompt_index": self.prompt_index, "method": self.method,
                "reward": self.reward, "diversity": self.diversity,
                "coherence": self.coherence, "n_tokens": self.n_tokens}


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n_prompts: int
    mean_reward: float
    normalized_reward: float | None
    mean_diversity: float | None
    mean_coherence: float | None

    def to_obj(self) -> dict:
        return {"method": self.method, "n_prompts": self.n_prompts,
                "mean_reward": self.mean_reward,
                "normalized_reward": self.normalized_reward,
                "mean_diversity": self.mean_diversity,
                "mean_coherence": self.mean_coherence}


@dataclass(frozen=True)
class EvalReport:
    """Per-prompt rows plus per-method aggregates."""

    rows: tuple[PromptRow, ...]
    summaries: tuple[MethodSummary, ...]
    anchor_method: str | None
    r_min_mode: str

    def to_obj(self) -> dict:
        return {
            "anchor_method": self.anchor_method,
            "r_min_mode": self.r_min_mode,
            "summaries": [s.to_obj() for s in self.summaries],
            "rows": [r.to_obj() for r in self.rows],
        }

    def dumps(self) -> str:
        return canon_dumps(self.to_obj())

    def to_csv(self) -> str:
        return canon_csv([r.to_obj() for r in self.rows], CSV_COLUMNS)


def _mean_present(values: list[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return math.fsum(present) / len(present) if present else None


def build_report(rows: list[PromptRow], anchor_method: str | None = None,
                 r_min_mode: str = "global") -> EvalReport:
    """Aggregate per-prompt rows into per-method summaries.

    r_min_mode picks the floor of the normalization: "global" uses the
    minimum mean across methods (all normalized values land in [0, 1] when
    the anchor is the best method); "per_method" uses each method's own
    minimum per-prompt reward, matching a per-dataset-minimum reading.
    Normalization is skipped (None) when no anchor is given or the span is
    degenerate.
    """
    if r_min_mode not in ("global", "per_method"):
        raise ConfigError(f"unknown r_min_mode {r_min_mode!r}")
    methods: dict[str, list[PromptRow]] = {}
    for row in rows:
        methods.setdefault(row.method, []).append(row)
    if not methods:
        raise ConfigError("build_report needs at least one row")

    means = {m: average_reward([r.reward for r in rs])
             for m, rs in methods.items()}
    normalized: dict[str, float] = {}
    if anchor_method is not None:
        if r_min_mode == "global":
            r_min = min(means.values())
        else:
            r_min = min(r.reward for r in methods[anchor_method])
        try:
            normalized = normalize_rewards(means, anchor_method, r_min)
        except ConfigError:
            normalized = {}

    summaries = []
    for method in sorted(methods):
        rs = methods[method]
        summaries.append(MethodSummary(
            method=method,
            n_prompts=len(rs),
            mean_reward=means[method],
            normalized_reward=normalized.get(method),
            mean_diversity=_mean_present([r.diversity for r in rs]),
            mean_coherence=_mean_present([r.coherence for r in rs]),
        ))
    return EvalReport(rows=tuple(rows), summaries=tuple(summaries),
                      anchor_method=anchor_method, r_min_mode=r_min_mode)
