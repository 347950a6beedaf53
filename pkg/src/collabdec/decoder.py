"""The per-token agent-switching decoder and the two baselines it is
compared against: single-agent reward-tilted decoding and best-of-N.

At every step the switching decoder scores each agent's own top-k tokens
with the configured Q estimator, subtracts the agent's token-level KL from
the reference policy (computed once per agent per step), and emits the
(agent, token) pair with the highest J value.  Ties within 1e-12 go to the
lower agent index, then the lower token id, so traces are reproducible.

Every decode returns a full trace: all candidates at every step, the
chosen pair, and per-agent attribution counts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import (DecoderConfig, State, TokenId, append_token, derive_seed,
                   initial_state)
from .errors import CollabError, ConfigError
from .policy import (AgentPolicy, AgentPool, next_distribution, sample_token,
                     token_kl)
from .qeval import (CandidateScore, QEstimate, RolloutConfig, q_exact_dp,
                    q_mc, q_prefix_proxy, resolve_estimator)
from .reward import RewardModel, trajectory_reward
from .serialize import canon_dumps

log = logging.getLogger(__name__)

J_TIE_TOL = 1e-12


class DecodeAborted(CollabError):
    """A backend failure aborted decoding; carries the trace accumulated up
    to the failure point."""

    def __init__(self, message: str, partial_trace: "DecodeTrace", cause: Exception):
        self.partial_trace = partial_trace
        self.cause = cause
        super().__init__(f"{message}: {cause}")


@dataclass(frozen=True)
class StepRecord:
    """One switching step: every candidate evaluated and the chosen pair."""

    t: int
    candidates: tuple[CandidateScore, ...]
    chosen_agent: int
    chosen_token: TokenId

    def __post_init__(self) -> None:
        best = _argmax_candidates(self.candidates)
        if (best.agent, best.token) != (self.chosen_agent, self.chosen_token):
            raise ConfigError(
                f"step {self.t}: chosen ({self.chosen_agent}, {self.chosen_token}) "
                f"is not the tie-break argmax ({best.agent}, {best.token})")


@dataclass(frozen=True)
class GreedyCandidate:
    """One token candidate in a single-agent step: the agent's log-prob,
    the Q estimate, and the combined selection score."""

    token: TokenId
    logprob: float
    q: QEstimate
    score: float
    prob: float | None = None  # tilted-sampling probability, when sampled


@dataclass(frozen=True)
class GreedyStepRecord:
    """One single-agent decoding step."""

    t: int
    candidates: tuple[GreedyCandidate, ...]
    chosen_token: TokenId
    sampled: bool = False


@dataclass(frozen=True)
class DecodeTrace:
    """Full decoding record: per-step candidates, the emitted sequence, and
    per-agent attribution counts (who produced each token)."""

    method: str
    prompt: tuple[TokenId, ...]
    steps: tuple
    output: tuple[TokenId, ...]
    config: dict
    attribution: dict[int, int]
    extra: dict | None = None

    def __post_init__(self) -> None:
        if self.steps:
            rebuilt = tuple(s.chosen_token for s in self.steps)
            if rebuilt != self.output:
                raise ConfigError("trace output does not reconstruct from steps")
        if sum(self.attribution.values()) != len(self.output):
            raise ConfigError("attribution counts do not sum to output length")

    def to_obj(self) -> dict:
        steps = []
        for s in self.steps:
            if isinstance(s, StepRecord):
                steps.append({
                    "t": s.t,
                    "candidates": [_cand_obj(c) for c in s.candidates],
                    "chosen_agent": s.chosen_agent,
                    "chosen_token": s.chosen_token,
                })
            else:
                steps.append({
                    "t": s.t,
                    "candidates": [
                        {"token": c.token, "logprob": c.logprob,
                         "q": _q_obj(c.q), "score": c.score,
                         **({"prob": c.prob} if c.prob is not None else {})}
                        for c in s.candidates],
                    "chosen_token": s.chosen_token,
                    "sampled": s.sampled,
                })
        return {
            "method": self.method,
            "prompt": list(self.prompt),
            "steps": steps,
            "output": list(self.output),
            "config": self.config,
            "attribution": {str(k): v for k, v in sorted(self.attribution.items())},
            **({"extra": self.extra} if self.extra is not None else {}),
        }

    def dumps(self) -> str:
        return canon_dumps(self.to_obj())


def _q_obj(q: QEstimate) -> dict:
    return {"value": q.value, "stderr": q.stderr, "method": q.method,
            "n_samples": q.n_samples}


def _cand_obj(c: CandidateScore) -> dict:
    return {"agent": c.agent, "token": c.token, "q": _q_obj(c.q),
            "kl": c.kl, "j_value": c.j_value}


def _argmax_candidates(candidates) -> CandidateScore:
    """Tie-break argmax: scan in (agent, token) order, replace only on a
    strict improvement beyond the tolerance."""
    ordered = sorted(candidates, key=lambda c: (c.agent, c.token))
    best = None
    for c in ordered:
        if best is None or c.j_value > best.j_value + J_TIE_TOL:
            best = c
    if best is None:
        raise ConfigError("no candidates to choose from")
    return best


def _config_snapshot(cfg: DecoderConfig, rcfg: RolloutConfig | None = None,
                     **extra) -> dict:
    snap = {
        "alpha": cfg.alpha, "beta": cfg.beta, "top_k": cfg.top_k,
        "max_new_tokens": cfg.max_new_tokens, "ref_agent": cfg.ref_agent,
        "seed": cfg.seed, "tie_break": cfg.tie_break,
        "q_estimator": cfg.q_estimator,
    }
    if rcfg is not None:
        snap["rollout"] = {"n_rollouts": rcfg.n_rollouts,
                           "max_len": rcfg.max_len, "seed": rcfg.seed}
    snap.update(extra)
    return snap


def _candidate_q(agent: AgentPolicy, method: str, r_target: RewardModel,
                 state: State, z: TokenId, cfg: DecoderConfig,
                 rcfg: RolloutConfig, agent_index: int) -> QEstimate:
    if method == "exact_dp":
        return q_exact_dp(agent, r_target, state, z, cfg.max_new_tokens)
    if method == "prefix_proxy":
        return q_prefix_proxy(r_target, state, z)
    # mc: derive an independent, scheduler-free seed per candidate
    seed = derive_seed(rcfg.seed, len(state.generated), agent_index, z)
    per_candidate = RolloutConfig(n_rollouts=rcfg.n_rollouts,
                                  max_len=rcfg.max_len, seed=seed)
    return q_mc(agent, r_target, state, z, per_candidate,
                horizon=cfg.max_new_tokens)


def collab_step(pool: AgentPool, r_target: RewardModel, state: State,
                cfg: DecoderConfig, rcfg: RolloutConfig) -> StepRecord:
    """One switching step: evaluate each agent's top-k candidates, pick the
    J-argmax pair.  Exactly one distribution call per agent (plus one for
    an out-of-pool reference) and K·k Q evaluations."""
    if state.terminal:
        raise ConfigError("collab_step on a terminal state")
    method = resolve_estimator(cfg, pool, state)
    rows = [next_distribution(a, state, None) for a in pool.agents]
    if any(pool.ref is a for a in pool.agents):
        ref_row = rows[next(i for i, a in enumerate(pool.agents) if pool.ref is a)]
    else:
        ref_row = next_distribution(pool.ref, state, None)
    kls = [token_kl(row, ref_row) for row in rows]

    candidates: list[CandidateScore] = []
    for i, (agent, row) in enumerate(zip(pool.agents, rows)):
        v_i = [z for z, p in row.entries[:cfg.top_k] if p > 0.0]
        for z in v_i:
            q = _candidate_q(agent, method, r_target, state, z, cfg, rcfg, i)
            candidates.append(CandidateScore(
                agent=i, token=z, q=q, kl=kls[i],
                j_value=q.value - cfg.alpha * kls[i]))
    candidates.sort(key=lambda c: (c.agent, c.token))
    best = _argmax_candidates(candidates)
    return StepRecord(t=len(state.generated), candidates=tuple(candidates),
                      chosen_agent=best.agent, chosen_token=best.token)


def collab_decode(pool: AgentPool, r_target: RewardModel, prompt,
                  cfg: DecoderConfig, rcfg: RolloutConfig) -> DecodeTrace:
    """Iterate collab_step until EOS or the horizon, appending each chosen
    token.  Deterministic given (config, seed, instance)."""
    state = initial_state(pool.vocab, prompt, cfg)
    steps: list[StepRecord] = []
    try:
        while not state.terminal:
            rec = collab_step(pool, r_target, state, cfg, rcfg)
            steps.append(rec)
            state = append_token(state, rec.chosen_token, cfg)
    except CollabError as exc:
        partial = _trace_from_steps("collab", state, steps, cfg, rcfg)
        raise DecodeAborted(
            f"decode aborted at step {len(steps)}", partial, exc) from exc
    return _trace_from_steps("collab", state, steps, cfg, rcfg)


def _trace_from_steps(method: str, state: State, steps: list[StepRecord],
                      cfg: DecoderConfig, rcfg: RolloutConfig) -> DecodeTrace:
    attribution: dict[int, int] = {}
    for s in steps:
        attribution[s.chosen_agent] = attribution.get(s.chosen_agent, 0) + 1
    return DecodeTrace(method=method, prompt=state.prompt,
                       steps=tuple(steps), output=state.generated,
                       config=_config_snapshot(cfg, rcfg),
                       attribution=attribution)


def single_agent_decode(agent: AgentPolicy, r_target: RewardModel, prompt,
                        cfg: DecoderConfig, rcfg: RolloutConfig,
                        mode: str = "greedy") -> DecodeTrace:
    """Single-agent reward-tilted decoding.

    greedy picks arg max over the agent's top-k of α·ln π(z|s) + Q(s, z)
    (the α-scaled closed-form tilt score; at α = 0 it degenerates to pure
    arg max Q).  tilted_sample draws from π(z|s)·exp(Q/α) renormalized over
    the candidate set, which requires α > 0.
    """
    if mode not in ("greedy", "tilted_sample"):
        raise ConfigError(f"unknown single-agent mode {mode!r}")
    if mode == "tilted_sample" and cfg.alpha <= 0.0:
        raise ConfigError("tilted_sample requires alpha > 0")
    pool = AgentPool(agents=(agent,), ref=agent)
    state = initial_state(agent.vocab, prompt, cfg)
    steps: list[GreedyStepRecord] = []
    try:
        while not state.terminal:
            t = len(state.generated)
            method = resolve_estimator(cfg, pool, state)
            row = next_distribution(agent, state, None)
            cands: list[GreedyCandidate] = []
            for z, p in sorted(row.entries[:cfg.top_k]):
                if p <= 0.0:
                    continue
                q = _candidate_q(agent, method, r_target, state, z, cfg, rcfg, 0)
                score = cfg.alpha * math.log(p) + q.value
                cands.append(GreedyCandidate(token=z, logprob=math.log(p),
                                             q=q, score=score))
            if mode == "greedy":
                best = None
                for c in cands:  # ascending token order: ties keep lower id
                    if best is None or c.score > best.score + J_TIE_TOL:
                        best = c
                chosen, sampled = best.token, False
            else:
                # renormalized tilt over the candidate set
                mx = max(c.score for c in cands)
                weights = [math.exp((c.score - mx) / cfg.alpha) for c in cands]
                total = sum(weights)
                probs = [w / total for w in weights]
                cands = [GreedyCandidate(token=c.token, logprob=c.logprob,
                                         q=c.q, score=c.score, prob=pr)
                         for c, pr in zip(cands, probs)]
                rng = np.random.default_rng(derive_seed(cfg.seed, "tilted", t))
                chosen = int(rng.choice([c.token for c in cands], p=probs))
                sampled = True
            steps.append(GreedyStepRecord(t=t, candidates=tuple(cands),
                                          chosen_token=chosen, sampled=sampled))
            state = append_token(state, chosen, cfg)
    except CollabError as exc:
        partial = _single_trace(agent, mode, state, steps, cfg, rcfg)
        raise DecodeAborted(
            f"decode aborted at step {len(steps)}", partial, exc) from exc
    return _single_trace(agent, mode, state, steps, cfg, rcfg)


def _single_trace(agent: AgentPolicy, mode: str, state: State,
                  steps: list[GreedyStepRecord], cfg: DecoderConfig,
                  rcfg: RolloutConfig) -> DecodeTrace:
    return DecodeTrace(method=f"single:{mode}", prompt=state.prompt,
                       steps=tuple(steps), output=state.generated,
                       config=_config_snapshot(cfg, rcfg, agent=agent.name),
                       attribution={0: len(state.generated)})


def bon_decode(pool: AgentPool, r_target: RewardModel, prompt,
               n_per_agent: int, cfg: DecoderConfig) -> DecodeTrace:
    """Best-of-N: sample n_per_agent full continuations per agent at
    temperature 1, score each with the target reward, return the best.
    Ties go to the earliest (agent index, sample index)."""
    if n_per_agent < 1:
        raise ConfigError(f"n_per_agent must be >= 1, got {n_per_agent}")
    state = initial_state(pool.vocab, prompt, cfg)
    candidates = []
    best = None
    for i, agent in enumerate(pool.agents):
        for s in range(n_per_agent):
            if state.terminal:
                tokens: tuple[TokenId, ...] = ()
            else:
                first_rng = np.random.default_rng(
                    derive_seed(cfg.seed, "bon-first", i, s))
                z1 = sample_token(next_distribution(agent, state, None), first_rng)
                cont = agent.rollouts(state, z1, 1, cfg.max_new_tokens - 1,
                                      derive_seed(cfg.seed, "bon-cont", i, s))[0]
                tokens = (z1,) + cont.tokens
            reward = trajectory_reward(r_target, state.prompt, tokens)
            candidates.append({"agent": i, "sample": s,
                               "tokens": list(tokens), "reward": reward})
            if best is None or reward > best[0]:
                best = (reward, i, s, tokens)
    reward, agent_i, sample_i, tokens = best
    return DecodeTrace(
        method="bon", prompt=state.prompt, steps=(),
        output=tokens,
        config=_config_snapshot(cfg, None, n_per_agent=n_per_agent),
        attribution={agent_i: len(tokens)},
        extra={"candidates": candidates,
               "winner": {"agent": agent_i, "sample": sample_i, "reward": reward}})
