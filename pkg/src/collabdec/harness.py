"""Experiment orchestration: strict config loading, prompt ingestion,
prompt × method decoding with per-prompt derived seeds, trace and report
emission, and manifest-driven replay.

Configs are YAML or JSON with unknown keys rejected.  Every prompt's seed
is derived from (config seed, prompt index), so results are byte-identical
regardless of worker count or scheduling order.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import __version__
from .core import DecoderConfig, TokenId, Vocab, derive_seed
from .decoder import DecodeTrace, bon_decode, collab_decode, single_agent_decode
from .errors import BackendError, CollabError, ConfigError, VerificationError
from .metrics import (EvalReport, PromptRow, TokenCountEmbedder, build_report,
                      coherence, diversity)
from .policy import (AgentPolicy, AgentPool, GibbsTiltedPolicy, NGramPolicy,
                     TabularPolicy, UniformPolicy)
from .qeval import RolloutConfig
from .remote import Endpoint, ProtocolClient, RemoteAgentPolicy, RemoteRewardModel
from .reward import (BlendReward, KeywordReward, RewardModel,
                     TabularTrajectoryReward, trajectory_reward)
from .serialize import canon_dumps

log = logging.getLogger(__name__)

DEFAULT_PROMPT_CAP = 128
PROTOCOL_VERSION = "1.0"


# --- config schema (strict: unknown keys are rejected) ---

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class VocabSpec(_Strict):
    size: int = Field(ge=2)
    eos_id: int = Field(ge=0)
    labels: list[str] | None = None


class RewardSpec(_Strict):
    kind: Literal["keyword", "tabular", "blend", "remote"]
    name: str | None = None
    # keyword
    weights: dict[int, float] | None = None
    bounds: tuple[float, float] | None = None
    # tabular
    table: dict[str, float] | None = None
    # blend
    components: list["RewardSpec"] | None = None
    blend_weights: list[float] | None = None
    # remote
    url: str | None = None
    timeout_ms: int = 10_000
    attempts: int = 3

    @model_validator(mode="after")
    def _fields_for_kind(self) -> "RewardSpec":
        required = {"keyword": ("weights",), "tabular": ("table",),
                    "blend": ("components", "blend_weights"),
                    "remote": ("url",)}[self.kind]
        for f in required:
            if getattr(self, f) is None:
                raise ValueError(f"reward kind {self.kind!r} requires {f!r}")
        return self


class AgentSpec(_Strict):
    kind: Literal["tabular", "ngram", "uniform", "gibbs", "remote"]
    name: str | None = None
    # tabular
    rows: dict[str, dict[int, float]] | None = None
    # ngram
    n: int | None = Field(default=None, ge=1)
    corpus: list[list[int]] | None = None
    lam: float = 1.0
    # gibbs
    base: "AgentSpec | None" = None
    reward: RewardSpec | None = None
    beta: float | None = Field(default=None, gt=0)
    # remote
    url: str | None = None
    timeout_ms: int = 10_000
    attempts: int = 3

    @model_validator(mode="after")
    def _fields_for_kind(self) -> "AgentSpec":
        required = {"tabular": ("rows",), "ngram": ("n", "corpus"),
                    "uniform": (), "gibbs": ("base", "reward", "beta"),
                    "remote": ("url",)}[self.kind]
        for f in required:
            if getattr(self, f) is None:
                raise ValueError(f"agent kind {self.kind!r} requires {f!r}")
        return self


class DecoderSpec(_Strict):
    alpha: float = Field(default=1.0, ge=0.0)
    beta: float = Field(default=1.0, gt=0.0)
    top_k: int = Field(default=10, ge=1)
    max_new_tokens: int = Field(default=64, ge=1)
    ref_agent: int | Literal["uniform"] = 0
    seed: int = 0
    tie_break: Literal["lower_agent_then_token"] = "lower_agent_then_token"
    q_estimator: Literal["auto", "mc", "prefix_proxy", "exact_dp"] = "auto"

    def build(self) -> DecoderConfig:
        return DecoderConfig(alpha=self.alpha, beta=self.beta, top_k=self.top_k,
                             max_new_tokens=self.max_new_tokens,
                             ref_agent=self.ref_agent, seed=self.seed,
                             tie_break=self.tie_break,
                             q_estimator=self.q_estimator)


class RolloutSpec(_Strict):
    n_rollouts: int = Field(default=32, ge=1)
    max_len: int | None = Field(default=None, ge=0)
    seed: int = 0

    def build(self) -> RolloutConfig:
        return RolloutConfig(n_rollouts=self.n_rollouts, max_len=self.max_len,
                             seed=self.seed)


class PromptSpec(_Strict):
    mode: Literal["ids", "labels"] = "ids"
    path: str | None = None
    inline: list[str] | None = None
    cap: int = Field(default=DEFAULT_PROMPT_CAP, ge=1)

    @model_validator(mode="after")
    def _one_source(self) -> "PromptSpec":
        if (self.path is None) == (self.inline is None):
            raise ValueError("prompts need exactly one of 'path' or 'inline'")
        return self


class NormalizationSpec(_Strict):
    anchor: str | None = "collab"
    r_min_mode: Literal["global", "per_method"] = "global"


class ExperimentConfig(_Strict):
    vocab: VocabSpec
    agents: list[AgentSpec] = Field(min_length=1)
    reward: RewardSpec
    decoder: DecoderSpec = DecoderSpec()
    rollout: RolloutSpec = RolloutSpec()
    methods: list[str] = Field(min_length=1)
    bon_n: int = Field(default=4, ge=1)
    prompts: PromptSpec
    output_dir: str = "out"
    n_prompts: int | None = Field(default=None, ge=1)
    workers: int | None = Field(default=None, ge=1)
    fail_fast: bool = False
    normalization: NormalizationSpec = NormalizationSpec()

    @model_validator(mode="after")
    def _check_methods(self) -> "ExperimentConfig":
        for m in self.methods:
            _parse_method(m, len(self.agents))
        if isinstance(self.decoder.ref_agent, int) and not (
                0 <= self.decoder.ref_agent < len(self.agents)):
            raise ValueError(
                f"ref_agent {self.decoder.ref_agent} out of range for "
                f"{len(self.agents)} agents")
        if not 0 <= self.vocab.eos_id < self.vocab.size:
            raise ValueError(f"eos_id {self.vocab.eos_id} outside vocab")
        return self


def _parse_method(method: str, n_agents: int) -> tuple[str, int | None]:
    """-> ("collab"|"bon"|"single", agent index for single)."""
    if method in ("collab", "bon"):
        return method, None
    if method == "single":
        return "single", 0
    if method.startswith("single:"):
        try:
            idx = int(method.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad method {method!r}") from None
        if not 0 <= idx < n_agents:
            raise ValueError(f"method {method!r}: agent index out of range")
        return "single", idx
    raise ValueError(f"unknown method {method!r} "
                     "(expected collab, single[:i], or bon)")


def method_slug(method: str) -> str:
    return method.replace(":", "")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix in (".yaml", ".yml"):
            raw = yaml.safe_load(text)
        else:
            raw = json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got "
                          f"{type(raw).__name__}")
    return validate_config(raw)


def validate_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except pydantic.ValidationError as exc:
        issues = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            issues.append(f"{loc}: {err['msg']}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(issues)) from exc


# --- prompt ingestion ---

@dataclass(frozen=True)
class PromptSet:
    prompts: tuple[tuple[TokenId, ...], ...]
    source: str
    warnings: tuple[str, ...] = ()


def load_prompts(spec: PromptSpec, vocab: Vocab) -> PromptSet:
    if spec.path is not None:
        path = Path(spec.path)
        if not path.is_file():
            raise ConfigError(f"prompt file not found: {path}")
        lines = path.read_text().splitlines()
        source = str(path)
    else:
        lines = list(spec.inline)
        source = "<inline>"
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ConfigError(f"prompt source {source} is empty")

    label_to_id: dict[str, int] = {}
    if spec.mode == "labels":
        if vocab.labels is None:
            raise ConfigError("label-mode prompts need a labeled vocab")
        label_to_id = {lab: i for i, lab in enumerate(vocab.labels)}

    prompts: list[tuple[TokenId, ...]] = []
    warnings: list[str] = []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if spec.mode == "ids":
            try:
                tokens = tuple(int(p) for p in parts)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: non-integer token "
                                  f"in {line!r}") from exc
        else:
            missing = [p for p in parts if p not in label_to_id]
            if missing:
                raise ConfigError(f"{source}:{lineno}: unknown label(s) "
                                  f"{missing}")
            tokens = tuple(label_to_id[p] for p in parts)
        for t in tokens:
            if not 0 <= t < vocab.size:
                raise ConfigError(f"{source}:{lineno}: token {t} outside "
                                  f"vocab of size {vocab.size}")
        if len(tokens) > spec.cap:
            msg = (f"{source}:{lineno}: prompt of {len(tokens)} tokens "
                   f"truncated to cap {spec.cap}")
            warnings.append(msg)
            log.warning(msg)
            tokens = tokens[:spec.cap]
        prompts.append(tokens)
    return PromptSet(prompts=tuple(prompts), source=source,
                     warnings=tuple(warnings))


# --- builders: config specs -> engine objects ---

def _parse_ctx(key: str) -> tuple[TokenId, ...]:
    key = key.strip()
    return tuple(int(p) for p in key.split()) if key else ()


def build_reward(spec: RewardSpec, vocab: Vocab,
                 clients: dict[str, ProtocolClient] | None = None) -> RewardModel:
    if spec.kind == "keyword":
        bounds = spec.bounds or (0.0, 1.0)
        return KeywordReward(weights=tuple(sorted(spec.weights.items())),
                             bounds=bounds, label=spec.name or "keyword")
    if spec.kind == "tabular":
        bounds = spec.bounds or (0.0, 1.0)
        return TabularTrajectoryReward(
            table={_parse_ctx(k): v for k, v in spec.table.items()},
            bounds=bounds, label=spec.name or "tabular-reward")
    if spec.kind == "blend":
        comps = tuple(build_reward(c, vocab, clients) for c in spec.components)
        return BlendReward(components=comps,
                           weights=tuple(spec.blend_weights),
                           label=spec.name or "blend")
    ep = Endpoint(base_url=spec.url, timeout_ms=spec.timeout_ms,
                  attempts=spec.attempts)
    return RemoteRewardModel(ep, client=_shared_client(ep, clients))


def _shared_client(ep: Endpoint,
                   clients: dict[str, ProtocolClient] | None) -> ProtocolClient | None:
    if clients is None:
        return None
    if ep.base_url not in clients:
        clients[ep.base_url] = ProtocolClient(ep)
    return clients[ep.base_url]


class AgentBuilder:
    """Builds an agent for a given prompt.

    Most agent kinds are prompt-independent and cached once; a Gibbs-tilted
    agent is an exact trajectory-level object tied to its prompt, so it is
    constructed (and cached) per prompt.
    """

    def __init__(self, spec: AgentSpec, vocab: Vocab, horizon: int,
                 index: int, clients: dict[str, ProtocolClient] | None = None):
        self.spec = spec
        self.vocab = vocab
        self.horizon = horizon
        self.index = index
        self.clients = clients
        self._static: AgentPolicy | None = None
        self._per_prompt: dict[tuple[TokenId, ...], AgentPolicy] = {}

    @property
    def prompt_dependent(self) -> bool:
        return self.spec.kind == "gibbs"

    def build(self, prompt: tuple[TokenId, ...]) -> AgentPolicy:
        if not self.prompt_dependent:
            if self._static is None:
                self._static = self._build_static()
            return self._static
        if prompt not in self._per_prompt:
            self._per_prompt[prompt] = self._build_gibbs(prompt)
        return self._per_prompt[prompt]

    def _build_static(self) -> AgentPolicy:
        spec, vocab = self.spec, self.vocab
        name = spec.name or f"{spec.kind}-{self.index}"
        if spec.kind == "tabular":
            rows = {_parse_ctx(k): dict(v) for k, v in spec.rows.items()}
            return TabularPolicy(vocab, rows, name=name)
        if spec.kind == "ngram":
            corpus = [list(seq) for seq in spec.corpus]
            return NGramPolicy.fit(vocab, spec.n, corpus, lam=spec.lam,
                                   name=name)
        if spec.kind == "uniform":
            return UniformPolicy(vocab)
        ep = Endpoint(base_url=spec.url, timeout_ms=spec.timeout_ms,
                      attempts=spec.attempts)
        return RemoteAgentPolicy(ep, client=_shared_client(ep, self.clients))

    def _build_gibbs(self, prompt: tuple[TokenId, ...]) -> AgentPolicy:
        spec = self.spec
        base_builder = AgentBuilder(spec.base, self.vocab, self.horizon,
                                    self.index, self.clients)
        base = base_builder.build(prompt)
        reward = build_reward(spec.reward, self.vocab, self.clients)
        return GibbsTiltedPolicy(base, reward, spec.beta, prompt, self.horizon,
                                 name=spec.name or f"gibbs-{self.index}")


def build_vocab(spec: VocabSpec) -> Vocab:
    labels = tuple(spec.labels) if spec.labels is not None else None
    return Vocab(size=spec.size, eos_id=spec.eos_id, labels=labels)


@dataclass
class Workbench:
    """Everything an experiment run needs, built from a validated config."""

    cfg: ExperimentConfig
    vocab: Vocab
    agent_builders: list[AgentBuilder]
    reward: RewardModel
    decoder_cfg: DecoderConfig
    rollout_cfg: RolloutConfig
    clients: dict[str, ProtocolClient]

    def pool(self, prompt: tuple[TokenId, ...]) -> AgentPool:
        agents = tuple(b.build(prompt) for b in self.agent_builders)
        return AgentPool.build(agents, ref_agent=self.decoder_cfg.ref_agent)

    def close(self) -> None:
        for client in self.clients.values():
            client.close()


def build_workbench(cfg: ExperimentConfig) -> Workbench:
    vocab = build_vocab(cfg.vocab)
    decoder_cfg = cfg.decoder.build()
    clients: dict[str, ProtocolClient] = {}
    builders = [AgentBuilder(spec, vocab, decoder_cfg.max_new_tokens, i, clients)
                for i, spec in enumerate(cfg.agents)]
    reward = build_reward(cfg.reward, vocab, clients)
    return Workbench(cfg=cfg, vocab=vocab, agent_builders=builders,
                     reward=reward, decoder_cfg=decoder_cfg,
                     rollout_cfg=cfg.rollout.build(), clients=clients)


# --- experiment execution ---

@dataclass(frozen=True)
class JobResult:
    prompt_index: int
    method: str
    trace: DecodeTrace | None
    row: PromptRow | None
    error: str | None
    error_kind: str | None
    wall_ms: float


@dataclass(frozen=True)
class RunResult:
    report: EvalReport
    out_dir: Path
    manifest: dict
    failures: tuple[dict, ...]

    @property
    def exit_code(self) -> int:
        return 4 if self.failures else 0


def _decode_job(bench: Workbench, prompt_index: int,
                prompt: tuple[TokenId, ...], method: str) -> JobResult:
    t0 = time.perf_counter()
    cfg = bench.decoder_cfg.with_(seed=derive_seed(bench.decoder_cfg.seed,
                                                   prompt_index))
    rcfg = RolloutConfig(n_rollouts=bench.rollout_cfg.n_rollouts,
                         max_len=bench.rollout_cfg.max_len,
                         seed=derive_seed(bench.rollout_cfg.seed, "rollout",
                                          prompt_index))
    kind, agent_idx = _parse_method(method, len(bench.agent_builders))
    try:
        pool = bench.pool(prompt)
        if kind == "collab":
            trace = collab_decode(pool, bench.reward, prompt, cfg, rcfg)
        elif kind == "bon":
            trace = bon_decode(pool, bench.reward, prompt, bench.cfg.bon_n, cfg)
        else:
            trace = single_agent_decode(pool.agents[agent_idx], bench.reward,
                                        prompt, cfg, rcfg, mode="greedy")
        reward = trajectory_reward(bench.reward, prompt, trace.output)
        embedder = TokenCountEmbedder(bench.vocab.size)
        row = PromptRow(
            prompt_index=prompt_index, method=method, reward=reward,
            diversity=diversity(trace.output),
            coherence=(coherence(prompt, trace.output, embedder)
                       if prompt and trace.output else None),
            n_tokens=len(trace.output))
        wall = (time.perf_counter() - t0) * 1000.0
        return JobResult(prompt_index=prompt_index, method=method,
                         trace=trace, row=row, error=None, error_kind=None,
                         wall_ms=wall)
    except CollabError as exc:
        wall = (time.perf_counter() - t0) * 1000.0
        log.error("prompt %d method %s failed: %s", prompt_index, method, exc)
        return JobResult(prompt_index=prompt_index, method=method, trace=None,
                         row=None, error=str(exc),
                         error_kind=type(exc).__name__, wall_ms=wall)


def run_experiment(cfg: ExperimentConfig,
                   out_dir: str | Path | None = None) -> RunResult:
    """Decode every prompt with every method; emit traces, reports, and a
    manifest.  Raises on config/build failures; per-job failures are
    recorded and reflected in the exit code."""
    bench = build_workbench(cfg)
    try:
        return _run_with_bench(bench, cfg, out_dir)
    finally:
        bench.close()


def _run_with_bench(bench: Workbench, cfg: ExperimentConfig,
                    out_dir: str | Path | None) -> RunResult:
    t_start = time.perf_counter()
    prompt_set = load_prompts(cfg.prompts, bench.vocab)
    prompts = prompt_set.prompts
    if cfg.n_prompts is not None:
        prompts = prompts[:cfg.n_prompts]

    out = Path(out_dir) if out_dir is not None else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    jobs = [(idx, prompt, method)
            for idx, prompt in enumerate(prompts)
            for method in cfg.methods]
    workers = cfg.workers or min(8, os.cpu_count() or 1)
    results: list[JobResult] = []
    if workers == 1:
        for idx, prompt, method in jobs:
            res = _decode_job(bench, idx, prompt, method)
            results.append(res)
            if res.error and cfg.fail_fast:
                break
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_decode_job, bench, idx, prompt, method)
                       for idx, prompt, method in jobs]
            for fut in futures:
                res = fut.result()
                results.append(res)
                if res.error and cfg.fail_fast:
                    for other in futures:
                        other.cancel()
                    break

    results.sort(key=lambda r: (r.prompt_index, r.method))
    for res in results:
        if res.trace is not None:
            path = out / f"trace_p{res.prompt_index:03d}_{method_slug(res.method)}.json"
            path.write_text(res.trace.dumps())

    rows = [r.row for r in results if r.row is not None]
    failures = tuple({"prompt_index": r.prompt_index, "method": r.method,
                      "error_kind": r.error_kind, "error": r.error}
                     for r in results if r.error is not None)
    anchor = cfg.normalization.anchor
    if anchor is not None and not any(r.method == anchor for r in rows):
        anchor = None
    if rows:
        report = build_report(rows, anchor_method=anchor,
                              r_min_mode=cfg.normalization.r_min_mode)
    else:
        report = EvalReport(rows=(), summaries=(), anchor_method=None,
                            r_min_mode=cfg.normalization.r_min_mode)
    (out / "report.json").write_text(report.dumps())
    (out / "report.csv").write_text(report.to_csv())

    manifest = {
        "version": __version__,
        "protocol": PROTOCOL_VERSION,
        "config": cfg.model_dump(mode="json"),
        "output_dir": str(out),
        "prompt_source": prompt_set.source,
        "prompt_warnings": list(prompt_set.warnings),
        "n_prompts": len(prompts),
        "seeds": {str(i): derive_seed(bench.decoder_cfg.seed, i)
                  for i in range(len(prompts))},
        "failures": list(failures),
        "wall_ms": {f"p{r.prompt_index:03d}:{r.method}": r.wall_ms
                    for r in results},
        "total_wall_ms": (time.perf_counter() - t_start) * 1000.0,
    }
    (out / "manifest.json").write_text(canon_dumps(manifest))
    return RunResult(report=report, out_dir=out, manifest=manifest,
                     failures=failures)


# --- replay ---

REPLAY_COMPARED = ("report.json", "report.csv")


def replay_manifest(manifest_path: str | Path,
                    replay_dir: str | Path | None = None) -> list[str]:
    """Re-execute a run from its manifest and byte-compare the outputs.
    Returns the list of mismatched/missing files (empty = faithful)."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ConfigError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse manifest: {exc}") from exc
    for key in ("config", "output_dir"):
        if key not in manifest:
            raise ConfigError(f"manifest missing {key!r}")
    cfg = validate_config(manifest["config"])
    original = Path(manifest["output_dir"])
    if not original.is_dir():
        raise ConfigError(f"original output dir missing: {original}")

    replay_out = Path(replay_dir) if replay_dir is not None else (
        original.parent / (original.name + "_replay"))
    run_experiment(cfg, out_dir=replay_out)

    mismatches: list[str] = []
    names = sorted({p.name for p in original.glob("trace_*.json")}
                   | set(REPLAY_COMPARED))
    for name in names:
        a, b = original / name, replay_out / name
        if not a.is_file() or not b.is_file():
            mismatches.append(f"{name}: missing "
                              f"({'original' if not a.is_file() else 'replay'})")
        elif a.read_bytes() != b.read_bytes():
            mismatches.append(f"{name}: content differs")
    return mismatches


def assert_replay(manifest_path: str | Path,
                  replay_dir: str | Path | None = None) -> None:
    mismatches = replay_manifest(manifest_path, replay_dir)
    if mismatches:
        raise VerificationError(
            "replay diverged from the recorded run:\n  " +
            "\n  ".join(mismatches))
