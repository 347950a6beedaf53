"""collabdec: inference-time collaboration of token-level policies.

At every decoding step the engine scores each agent's candidate tokens by
an implicit value — the estimated target-reward Q minus an α-weighted KL
penalty against a reference policy — and emits the best (agent, token)
pair.  The package bundles estimators (Monte-Carlo rollouts and an exact
enumerative oracle), baselines, evaluation metrics, a machine-checked
certification suite for the decoder's sub-optimality bound, and a wire
protocol for driving remote model servers.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .core import (DecoderConfig, State, TokenId, Trajectory, Vocab,
                   append_token, derive_seed, initial_state, is_terminal)
from .decoder import (DecodeTrace, GreedyStepRecord, StepRecord, bon_decode,
                      collab_decode, collab_step, single_agent_decode)
from .errors import (BackendError, CapabilityError, CollabError, ConfigError,
                     ContractViolation, EnumerabilityError, NetworkError,
                     SupportViolationError, VerificationError)
from .metrics import (EvalReport, average_reward, build_report, coherence,
                      diversity, normalize_rewards)
from .policy import (AgentPolicy, AgentPool, GibbsTiltedPolicy, NGramPolicy,
                     TabularPolicy, TokenDistribution, UniformPolicy,
                     next_distribution, sample_rollouts, token_kl,
                     top_k_candidates)
from .qeval import (CandidateScore, QEstimate, RolloutConfig, q_exact_dp,
                    q_mc, q_prefix_proxy)
from .reward import (BlendReward, KeywordReward, RewardModel,
                     TabularTrajectoryReward, keyword_reward, prefix_reward,
                     trajectory_reward)

__all__ = [
    "__version__",
    # core
    "DecoderConfig", "State", "TokenId", "Trajectory", "Vocab",
    "append_token", "derive_seed", "initial_state", "is_terminal",
    # policies
    "AgentPolicy", "AgentPool", "GibbsTiltedPolicy", "NGramPolicy",
    "TabularPolicy", "TokenDistribution", "UniformPolicy",
    "next_distribution", "sample_rollouts", "token_kl", "top_k_candidates",
    # rewards
    "BlendReward", "KeywordReward", "RewardModel", "TabularTrajectoryReward",
    "keyword_reward", "prefix_reward", "trajectory_reward",
    # Q estimation
    "CandidateScore", "QEstimate", "RolloutConfig", "q_exact_dp", "q_mc",
    "q_prefix_proxy",
    # decoding
    "DecodeTrace", "GreedyStepRecord", "StepRecord", "bon_decode",
    "collab_decode", "collab_step", "single_agent_decode",
    # metrics
    "EvalReport", "average_reward", "build_report", "coherence", "diversity",
    "normalize_rewards",
    # errors
    "BackendError", "CapabilityError", "CollabError", "ConfigError",
    "ContractViolation", "EnumerabilityError", "NetworkError",
    "SupportViolationError", "VerificationError",
]
