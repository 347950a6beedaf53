"""Machine certification of the decoder's sub-optimality bound on
enumerable instances.

Instances are small token MDPs with a full-support tabular reference
policy, random bounded latent rewards, and agents realized as exact
Gibbs-tilted optima of those rewards.  Everything here is computed by
full enumeration — no Monte Carlo — so the certified inequalities are
exact up to float arithmetic:

  switching-gap bound (per state-action):
      Q*(s,z) − Q_alg(s,z) ≤ min_j [δ*_j + α·KL(π_j(·|s) ‖ π_ref(·|s))]
                              + β·KL(ρ*(·|s) ‖ ρ_ref(·|s))
  cross-agent Q gap (per agent pair):
      Q_i(s,z) − Q_j(s,z) ≤ δ_ij + β·KL_i(s,z) − β·KL_j(s,z)

Q_alg is obtained by running the actual switching decoder (exact-DP
estimator, full-vocabulary candidates) from [s, z], so the certificate
covers the shipped implementation, not a re-derivation of it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import DecoderConfig, State, TokenId, Vocab, append_token, derive_seed, initial_state
from .decoder import collab_step
from .errors import ConfigError, EnumerabilityError
from .policy import (AgentPolicy, AgentPool, GibbsTiltedPolicy, TabularPolicy,
                     enumerate_leaves, next_distribution, prefix_masses,
                     token_kl)
from .qeval import ENUMERATION_GUARD, RolloutConfig, enumerable
from .reward import RewardModel, TabularTrajectoryReward, trajectory_reward

log = logging.getLogger(__name__)

SLACK_TOL = 1e-9


@dataclass(frozen=True)
class InstanceParams:
    """Shape of a synthetic instance; the defaults keep the trajectory tree
    tiny so thousand-instance suites stay fast."""

    vocab_size: int = 3
    horizon: int = 3
    n_agents: int = 2
    beta: float = 1.0
    prompt: tuple[TokenId, ...] = ()
    reward_lo: float = 0.0
    reward_hi: float = 1.0
    ref_floor: float = 0.05  # min per-token ref probability (full support)

    def __post_init__(self) -> None:
        if not 2 <= self.vocab_size <= 6:
            raise ConfigError(f"vocab_size must be in [2, 6], got {self.vocab_size}")
        if not 1 <= self.horizon <= 6:
            raise ConfigError(f"horizon must be in [1, 6], got {self.horizon}")
        if not enumerable(self.vocab_size, self.horizon, ENUMERATION_GUARD):
            raise EnumerabilityError(
                f"|V|^T = {self.vocab_size}^{self.horizon} exceeds the guard")
        if self.n_agents < 1:
            raise ConfigError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if not self.reward_lo < self.reward_hi:
            raise ConfigError("reward_lo must be < reward_hi")
        if not 0.0 < self.ref_floor < 1.0 / self.vocab_size:
            raise ConfigError(
                f"ref_floor must be in (0, 1/{self.vocab_size}), got {self.ref_floor}")


@dataclass(eq=False)
class SyntheticInstance:
    """An enumerable MDP with Gibbs-aligned agents.

    May also be constructed directly with arbitrary agents (e.g. a
    deliberately mis-aligned one) — the verifiers only assume the declared
    latent rewards and whatever the agents actually report.
    """

    params: InstanceParams
    seed: int
    vocab: Vocab
    ref: AgentPolicy
    rewards: tuple[RewardModel, ...]   # declared latent reward per agent
    r_target: RewardModel
    agents: tuple[AgentPolicy, ...]

    def __post_init__(self) -> None:
        if len(self.rewards) != len(self.agents):
            raise ConfigError("one latent reward per agent required")

    @property
    def prompt(self) -> tuple[TokenId, ...]:
        return self.params.prompt

    @property
    def horizon(self) -> int:
        return self.params.horizon

    @property
    def beta(self) -> float:
        return self.params.beta

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @cached_property
    def pool(self) -> AgentPool:
        return AgentPool(agents=self.agents, ref=self.ref)

    @cached_property
    def ref_leaves(self) -> dict[tuple[TokenId, ...], float]:
        return enumerate_leaves(self.ref, self.prompt, self.horizon)

    @cached_property
    def ref_prefix(self) -> dict[tuple[TokenId, ...], float]:
        return prefix_masses(self.ref_leaves)

    @cached_property
    def leaves(self) -> tuple[tuple[TokenId, ...], ...]:
        return tuple(sorted(self.ref_leaves))

    @cached_property
    def non_terminal_states(self) -> tuple[tuple[TokenId, ...], ...]:
        """All generated-prefixes at which the decoder still acts."""
        out = [pre for pre in sorted(self.ref_prefix)
               if len(pre) < self.horizon
               and (not pre or pre[-1] != self.vocab.eos_id)]
        return tuple(out)

    def state(self, gen: tuple[TokenId, ...]) -> State:
        cfg = DecoderConfig(max_new_tokens=self.horizon)
        return initial_state(self.vocab, self.prompt, cfg, generated=gen)

    def ref_conditional(self, prefix: tuple[TokenId, ...]) -> dict[tuple[TokenId, ...], float]:
        mass = self.ref_prefix.get(tuple(prefix))
        if mass is None or mass <= 0.0:
            raise ConfigError(f"prefix {prefix} has no reference mass")
        return {leaf: w / mass for leaf, w in self.ref_leaves.items()
                if leaf[:len(prefix)] == tuple(prefix)}


def gen_instance(params: InstanceParams | None = None, seed: int = 0) -> SyntheticInstance:
    """Draw a random instance: Dirichlet reference rows lifted to a full-
    support floor, i.i.d. uniform leaf rewards, Gibbs-tilted agents."""
    params = params or InstanceParams()
    rng = np.random.default_rng(seed)
    eos = params.vocab_size - 1
    vocab = Vocab(size=params.vocab_size, eos_id=eos)

    # every non-terminal context: non-EOS strings of length < horizon
    contexts: list[tuple[TokenId, ...]] = [()]
    frontier: list[tuple[TokenId, ...]] = [()]
    for _ in range(params.horizon - 1):
        frontier = [pre + (z,) for pre in frontier
                    for z in range(params.vocab_size) if z != eos]
        contexts.extend(frontier)
    rows: dict[tuple[TokenId, ...], dict[TokenId, float]] = {}
    scale = 1.0 - params.vocab_size * params.ref_floor
    for gen in sorted(contexts):
        probs = rng.dirichlet(np.ones(params.vocab_size))
        rows[params.prompt + gen] = {
            z: params.ref_floor + scale * float(p) for z, p in enumerate(probs)}
    ref = TabularPolicy(vocab, rows, name=f"ref-{seed}")

    leaves = tuple(sorted(enumerate_leaves(ref, params.prompt, params.horizon)))
    lo, hi = params.reward_lo, params.reward_hi

    def draw_reward(label: str) -> TabularTrajectoryReward:
        vals = rng.uniform(lo, hi, size=len(leaves))
        return TabularTrajectoryReward(
            table={leaf: float(v) for leaf, v in zip(leaves, vals)},
            bounds=(lo, hi), label=label)

    rewards = tuple(draw_reward(f"r{j + 1}") for j in range(params.n_agents))
    r_target = draw_reward("r-target")
    agents = tuple(
        GibbsTiltedPolicy(ref, r_j, params.beta, params.prompt, params.horizon,
                          name=f"agent{j + 1}")
        for j, r_j in enumerate(rewards))
    return SyntheticInstance(params=params, seed=seed, vocab=vocab, ref=ref,
                             rewards=rewards, r_target=r_target, agents=agents)


def with_target_agent(instance: SyntheticInstance) -> SyntheticInstance:
    """The monotonicity probe: the same instance plus one extra agent whose
    latent reward is exactly the target (drives min_j δ*_j to 0)."""
    params = InstanceParams(
        vocab_size=instance.params.vocab_size, horizon=instance.params.horizon,
        n_agents=instance.params.n_agents + 1, beta=instance.params.beta,
        prompt=instance.params.prompt, reward_lo=instance.params.reward_lo,
        reward_hi=instance.params.reward_hi, ref_floor=instance.params.ref_floor)
    extra = GibbsTiltedPolicy(instance.ref, instance.r_target, instance.beta,
                              instance.prompt, instance.horizon,
                              name="agent-target")
    return SyntheticInstance(
        params=params, seed=instance.seed, vocab=instance.vocab,
        ref=instance.ref, rewards=instance.rewards + (instance.r_target,),
        r_target=instance.r_target, agents=instance.agents + (extra,))


def delta_star(r_a: RewardModel, r_b: RewardModel,
               instance: SyntheticInstance) -> float:
    """max over the instance's full trajectory space of |r_a(τ) − r_b(τ)|."""
    best = 0.0
    for leaf in instance.leaves:
        gap = abs(trajectory_reward(r_a, instance.prompt, leaf)
                  - trajectory_reward(r_b, instance.prompt, leaf))
        if gap > best:
            best = gap
    return best


# --- exact trajectory-level quantities ---

def expected_reward(cond: dict[tuple[TokenId, ...], float], reward: RewardModel,
                    prompt: tuple[TokenId, ...]) -> float:
    return math.fsum(w * trajectory_reward(reward, prompt, leaf)
                     for leaf, w in sorted(cond.items()))


def kl_leaves(p: dict[tuple[TokenId, ...], float],
              q: dict[tuple[TokenId, ...], float]) -> float:
    """KL(p ‖ q) over two normalized leaf distributions, exact summation."""
    total = 0.0
    for leaf, pw in sorted(p.items()):
        if pw <= 0.0:
            continue
        qw = q.get(leaf, 0.0)
        if qw <= 0.0:
            raise ConfigError(f"KL support violation at leaf {leaf}")
        total += pw * math.log(pw / qw)
    return max(0.0, total)


def gibbs_conditional_kl(agent: GibbsTiltedPolicy,
                         prefix: tuple[TokenId, ...]) -> tuple[float, float]:
    """KL(ρ_agent(·|prefix) ‖ ρ_ref(·|prefix)) computed two independent
    ways: direct summation and the Gibbs log-partition identity
    E_cond[r]/β − ln Z(prefix).  Returns (direct, identity)."""
    prefix = tuple(prefix)
    cond = agent.conditional_leaves(prefix)
    ref_mass = agent.ref_prefix[prefix]
    ref_cond = {leaf: agent.ref_leaves[leaf] / ref_mass for leaf in cond}
    direct = kl_leaves(cond, ref_cond)
    e_r = expected_reward(cond, agent.reward, agent.prompt)
    identity = e_r / agent.beta - agent.conditional_log_partition(prefix)
    return direct, identity


# --- the unregularized optimum ---

class OptimalPolicy:
    """Backward-induction optimum of the target reward: exact Q* table and
    the deterministic greedy policy it induces (ties to the lowest token)."""

    def __init__(self, instance: SyntheticInstance, r_target: RewardModel):
        from .qeval import ExactDP
        self.instance = instance
        self.vocab = instance.vocab
        self.horizon = instance.horizon
        self.prompt = instance.prompt
        self._dp = ExactDP(agents=(), mode="optimal", r_target=r_target,
                           prompt=instance.prompt, horizon=instance.horizon,
                           vocab=instance.vocab)

    def q(self, gen: tuple[TokenId, ...], z: TokenId) -> float:
        return self._dp.q(tuple(gen), z)

    def v(self, gen: tuple[TokenId, ...]) -> float:
        return self._dp.v(tuple(gen))

    def action(self, gen: tuple[TokenId, ...]) -> TokenId:
        best_z, best_q = None, None
        for z in range(self.vocab.size):
            qz = self.q(gen, z)
            if best_q is None or qz > best_q + 1e-12:
                best_z, best_q = z, qz
        return best_z

    def greedy_trajectory(self, gen: tuple[TokenId, ...]) -> tuple[TokenId, ...]:
        gen = tuple(gen)
        while not self._dp._terminal(gen):
            gen = gen + (self.action(gen),)
        return gen


def optimal_policy_dp(instance: SyntheticInstance,
                      r_target: RewardModel | None = None) -> OptimalPolicy:
    return OptimalPolicy(instance, r_target or instance.r_target)


# --- the switching policy, exactly simulated ---

def _alg_config(instance: SyntheticInstance, alpha: float) -> DecoderConfig:
    return DecoderConfig(alpha=alpha, beta=instance.beta,
                         top_k=instance.vocab.size,
                         max_new_tokens=instance.horizon,
                         seed=0, q_estimator="exact_dp")


def simulate_switching(instance: SyntheticInstance, gen: tuple[TokenId, ...],
                       alpha: float) -> tuple[TokenId, ...]:
    """Run the shipped switching decoder from an interior state to a leaf.
    Deterministic: exact-DP Q, full-vocabulary candidates."""
    cfg = _alg_config(instance, alpha)
    rcfg = RolloutConfig(n_rollouts=1, max_len=None, seed=0)
    state = initial_state(instance.vocab, instance.prompt, cfg, generated=gen)
    while not state.terminal:
        rec = collab_step(instance.pool, instance.r_target, state, cfg, rcfg)
        state = append_token(state, rec.chosen_token, cfg)
    return state.generated


def q_alg(instance: SyntheticInstance, s: tuple[TokenId, ...], z: TokenId,
          alpha: float) -> float:
    """Q of the switching policy at (s, z): take z, then follow the
    deterministic switching continuation to its leaf."""
    leaf = simulate_switching(instance, tuple(s) + (z,), alpha)
    return trajectory_reward(instance.r_target, instance.prompt, leaf)


# --- reports ---

@dataclass(frozen=True)
class BoundReport:
    """One certified check of the switching-gap bound at (s, z)."""

    state: tuple[TokenId, ...]
    token: TokenId
    lhs_delta: float
    rhs_bound: float
    slack: float
    min_delta_star: float
    chosen_j: int
    alpha_kl_token: float
    beta_kl_traj: float
    pistar_variant: str
    holds: bool

    def __post_init__(self) -> None:
        for label, v in (("min_delta_star", self.min_delta_star),
                         ("alpha_kl_token", self.alpha_kl_token),
                         ("beta_kl_traj", self.beta_kl_traj)):
            if v < 0.0:
                raise ConfigError(f"negative bound component {label} = {v}")

    def to_obj(self) -> dict:
        return {"state": list(self.state), "token": self.token,
                "lhs_delta": self.lhs_delta, "rhs_bound": self.rhs_bound,
                "slack": self.slack, "min_delta_star": self.min_delta_star,
                "chosen_j": self.chosen_j,
                "alpha_kl_token": self.alpha_kl_token,
                "beta_kl_traj": self.beta_kl_traj,
                "pistar_variant": self.pistar_variant, "holds": self.holds}


@dataclass(frozen=True)
class LemmaReport:
    """One certified check of the cross-agent Q-gap inequality."""

    i: int
    j: int
    state: tuple[TokenId, ...]
    token: TokenId
    lhs: float
    rhs: float
    slack: float
    delta_ij: float
    kl_i: float
    kl_j: float
    holds: bool

    def to_obj(self) -> dict:
        return {"i": self.i, "j": self.j, "state": list(self.state),
                "token": self.token, "lhs": self.lhs, "rhs": self.rhs,
                "slack": self.slack, "delta_ij": self.delta_ij,
                "kl_i": self.kl_i, "kl_j": self.kl_j, "holds": self.holds}


class _InstanceAnalysis:
    """Per-instance memo shared across the (s, z) sweep."""

    def __init__(self, instance: SyntheticInstance, alpha: float, pistar: str):
        if pistar not in ("unregularized", "gibbs"):
            raise ConfigError(f"unknown pistar variant {pistar!r}")
        self.instance = instance
        self.alpha = alpha
        self.pistar = pistar
        self.opt = optimal_policy_dp(instance)
        self.deltas = [delta_star(instance.r_target, r_j, instance)
                       for r_j in instance.rewards]
        self._gibbs_star: GibbsTiltedPolicy | None = None
        if pistar == "gibbs":
            self._gibbs_star = GibbsTiltedPolicy(
                instance.ref, instance.r_target, instance.beta,
                instance.prompt, instance.horizon, name="pistar-gibbs")

    def q_star(self, s: tuple[TokenId, ...], z: TokenId) -> float:
        if self.pistar == "unregularized":
            return self.opt.q(s, z)
        cond = self._gibbs_star.conditional_leaves(s + (z,))
        return expected_reward(cond, self.instance.r_target, self.instance.prompt)

    def kl_traj(self, s: tuple[TokenId, ...]) -> float:
        inst = self.instance
        if self.pistar == "unregularized":
            # deterministic π*: point mass ⇒ KL = −ln ρ_ref(τ*|s)
            leaf = self.opt.greedy_trajectory(s)
            return max(0.0, -math.log(inst.ref_leaves[leaf] / inst.ref_prefix[s]))
        direct, _ = gibbs_conditional_kl(self._gibbs_star, s)
        return direct


def verify_theorem1(instance: SyntheticInstance, s: tuple[TokenId, ...],
                    z: TokenId, alpha: float = 1.0,
                    pistar: str = "unregularized",
                    _analysis: _InstanceAnalysis | None = None) -> BoundReport:
    """Certify the switching-gap bound at one (s, z)."""
    s = tuple(s)
    an = _analysis or _InstanceAnalysis(instance, alpha, pistar)
    state = instance.state(s)
    if state.terminal:
        raise ConfigError(f"state {s} is terminal; the bound is about decisions")
    ref_row = next_distribution(instance.ref, state, None)
    best_j, best_term, best_kl = None, None, None
    for j, agent in enumerate(instance.agents):
        kl_j = token_kl(next_distribution(agent, state, None), ref_row)
        term = an.deltas[j] + alpha * kl_j
        if best_term is None or term < best_term - 1e-15:
            best_j, best_term, best_kl = j, term, kl_j
    kl_traj = an.kl_traj(s)
    lhs = an.q_star(s, z) - q_alg(instance, s, z, alpha)
    rhs = best_term + instance.beta * kl_traj
    slack = rhs - lhs
    return BoundReport(
        state=s, token=z, lhs_delta=lhs, rhs_bound=rhs, slack=slack,
        min_delta_star=an.deltas[best_j], chosen_j=best_j,
        alpha_kl_token=alpha * best_kl,
        beta_kl_traj=instance.beta * kl_traj,
        pistar_variant=an.pistar, holds=slack >= -SLACK_TOL)


def verify_instance_theorem(instance: SyntheticInstance, alpha: float = 1.0,
                            pistar: str = "unregularized") -> list[BoundReport]:
    """Certify the bound at every non-terminal (s, z) of the instance."""
    an = _InstanceAnalysis(instance, alpha, pistar)
    reports = []
    for s in instance.non_terminal_states:
        for z in range(instance.vocab.size):
            reports.append(verify_theorem1(instance, s, z, alpha, pistar,
                                           _analysis=an))
    return reports


def verify_lemma1(instance: SyntheticInstance, i: int, j: int,
                  s: tuple[TokenId, ...], z: TokenId) -> LemmaReport:
    """Certify the cross-agent Q-gap inequality at one (i, j, s, z)."""
    s = tuple(s)
    if not (0 <= i < instance.n_agents and 0 <= j < instance.n_agents):
        raise ConfigError(f"agent indices ({i}, {j}) out of range")
    prefix = s + (z,)
    a_i, a_j = instance.agents[i], instance.agents[j]
    cond_i = a_i.conditional_leaves(prefix)
    cond_j = a_j.conditional_leaves(prefix)
    q_i = expected_reward(cond_i, instance.rewards[i], instance.prompt)
    q_j = expected_reward(cond_j, instance.rewards[j], instance.prompt)
    ref_cond = instance.ref_conditional(prefix)
    kl_i = kl_leaves(cond_i, ref_cond)
    kl_j = kl_leaves(cond_j, ref_cond)
    d_ij = delta_star(instance.rewards[i], instance.rewards[j], instance)
    lhs = q_i - q_j
    rhs = d_ij + instance.beta * kl_i - instance.beta * kl_j
    slack = rhs - lhs
    return LemmaReport(i=i, j=j, state=s, token=z, lhs=lhs, rhs=rhs,
                       slack=slack, delta_ij=d_ij, kl_i=kl_i, kl_j=kl_j,
                       holds=slack >= -SLACK_TOL)


# --- suites ---

@dataclass(frozen=True)
class SuiteResult:
    kind: str
    n_instances: int
    n_checks: int
    n_violations: int
    min_slack: float
    alpha: float | None
    pistar_variant: str | None
    failures: tuple

    @property
    def pass_rate(self) -> float:
        return 1.0 if self.n_checks == 0 else 1.0 - self.n_violations / self.n_checks

    @property
    def all_hold(self) -> bool:
        return self.n_violations == 0

    def to_obj(self) -> dict:
        return {"kind": self.kind, "n_instances": self.n_instances,
                "n_checks": self.n_checks, "n_violations": self.n_violations,
                "pass_rate": self.pass_rate, "min_slack": self.min_slack,
                "alpha": self.alpha, "pistar_variant": self.pistar_variant,
                "failures": [f.to_obj() for f in self.failures]}


def run_theorem_suite(n_instances: int, params: InstanceParams | None = None,
                      seed: int = 0, alpha: float = 1.0,
                      pistar: str = "unregularized",
                      max_failures: int = 10) -> SuiteResult:
    params = params or InstanceParams()
    n_checks = n_violations = 0
    min_slack = math.inf
    failures: list[BoundReport] = []
    for idx in range(n_instances):
        inst = gen_instance(params, derive_seed(seed, "theorem", idx))
        for rep in verify_instance_theorem(inst, alpha, pistar):
            n_checks += 1
            min_slack = min(min_slack, rep.slack)
            if not rep.holds:
                n_violations += 1
                if len(failures) < max_failures:
                    failures.append(rep)
    return SuiteResult(kind="theorem", n_instances=n_instances,
                       n_checks=n_checks, n_violations=n_violations,
                       min_slack=min_slack if n_checks else 0.0,
                       alpha=alpha, pistar_variant=pistar,
                       failures=tuple(failures))


def run_lemma_suite(n_draws: int, params: InstanceParams | None = None,
                    seed: int = 0, max_failures: int = 10) -> SuiteResult:
    """n_draws independent (instance, i, j, s, z) certifications."""
    params = params or InstanceParams()
    n_violations = 0
    min_slack = math.inf
    failures: list[LemmaReport] = []
    for d in range(n_draws):
        inst = gen_instance(params, derive_seed(seed, "lemma-inst", d))
        rng = np.random.default_rng(derive_seed(seed, "lemma-draw", d))
        i = int(rng.integers(inst.n_agents))
        j = int(rng.integers(inst.n_agents))
        states = inst.non_terminal_states
        s = states[int(rng.integers(len(states)))]
        z = int(rng.integers(inst.vocab.size))
        rep = verify_lemma1(inst, i, j, s, z)
        min_slack = min(min_slack, rep.slack)
        if not rep.holds:
            n_violations += 1
            if len(failures) < max_failures:
                failures.append(rep)
    return SuiteResult(kind="lemma", n_instances=n_draws, n_checks=n_draws,
                       n_violations=n_violations,
                       min_slack=min_slack if n_draws else 0.0,
                       alpha=None, pistar_variant=None,
                       failures=tuple(failures))


# --- deliberately broken instance: the verifier's negative control ---

def corrupt_instance() -> SyntheticInstance:
    """A hand-built instance whose agent falsely claims its latent reward
    equals the target while its policy steers into a low-reward subtree.
    The switching-gap bound must FAIL here; a verifier that passes it is
    broken."""
    params = InstanceParams(vocab_size=3, horizon=3, n_agents=1, beta=0.2)
    vocab = Vocab(size=3, eos_id=2)
    a, b, eos = 0, 1, 2
    ref_rows = {
        (): {a: 0.96, b: 0.02, eos: 0.02},
        (a,): {b: 0.80, a: 0.18, eos: 0.02},
        (b,): {a: 0.49, b: 0.49, eos: 0.02},
        (a, a): {a: 0.96, b: 0.02, eos: 0.02},
        (a, b): {b: 0.96, a: 0.02, eos: 0.02},
        (b, a): {a: 0.49, b: 0.49, eos: 0.02},
        (b, b): {a: 0.49, b: 0.49, eos: 0.02},
    }
    ref = TabularPolicy(vocab, ref_rows, name="corrupt-ref")
    leaves = sorted(enumerate_leaves(ref, (), 3))
    table = {}
    for leaf in leaves:
        if leaf == (a, b, b):
            table[leaf] = 1.0
        elif leaf == (a, a, a):
            table[leaf] = 0.3
        elif leaf[:2] == (a, a):
            table[leaf] = 0.25
        else:
            table[leaf] = 0.0
    r_target = TabularTrajectoryReward(table=table, bounds=(0.0, 1.0),
                                       label="corrupt-target")
    # the liar: parrots the reference everywhere the root decision is
    # scored (token-KL 0), but its continuation out of (a, b) abandons the
    # reward-1 leaf — so its own exact Q makes the good branch look bad
    # and the decode settles in the 0.3 subtree.  Q* from the root is 1.0,
    # while every bound component is ~0: the certificate must fail.
    liar_rows = dict(ref_rows)
    liar_rows[(a, b)] = {a: 0.98, b: 0.01, eos: 0.01}
    liar = TabularPolicy(vocab, liar_rows, name="corrupt-agent")
    return SyntheticInstance(params=params, seed=0, vocab=vocab, ref=ref,
                             rewards=(r_target,), r_target=r_target,
                             agents=(liar,))
