"""Wire-protocol v1.0 client: remote model servers as agents and rewards.

The protocol is four HTTP endpoints with structured-text bodies:

  GET  /v1/info      -> {version, vocab_size, eos_id, model, reward_bounds?}
  POST /v1/logprobs  {tokens, k}                        -> {entries: [{token, logprob}], tail_logprob}
  POST /v1/rollout   {tokens, n, max_len, temperature, seed} -> {continuations: [[int]]}
  POST /v1/reward    {prompt, response}                 -> {reward}

Floats travel as decimal text with at least 17 significant digits; log of
zero is the literal -1e999 (parses to -inf).  Reported probabilities must
sum to 1 within 1e-6; the client renormalizes the small residual so every
fetched distribution satisfies the engine's stricter invariant.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass

import httpx

from .core import State, TokenId, Trajectory, Vocab, stable_digest
from .errors import (ConfigError, HttpStatusError, MalformedResponseError,
                     NetworkError, NormalizationError,
                     ProtocolConformanceError, RewardBoundsError,
                     RolloutContractError, VersionMismatchError)
from .policy import AgentPolicy, TokenDistribution
from .reward import RewardModel
from .serialize import canon_dumps

log = logging.getLogger(__name__)

PROTOCOL_MAJOR = "1"
AUTH_TOKEN_ENV = "COLLAB_API_TOKEN"
WIRE_SUM_TOL = 1e-6


@dataclass(frozen=True)
class Endpoint:
    """Where and how to reach one protocol server."""

    base_url: str
    timeout_ms: int = 10_000
    attempts: int = 3
    backoff: tuple[float, ...] = (0.05, 0.2, 0.8)
    auth_token: str | None = None

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ConfigError(f"timeout_ms must be > 0, got {self.timeout_ms}")
        if self.attempts < 1:
            raise ConfigError(f"attempts must be >= 1, got {self.attempts}")

    def resolved_token(self) -> str | None:
        return self.auth_token or os.environ.get(AUTH_TOKEN_ENV) or None


@dataclass(frozen=True)
class ProtocolInfo:
    version: str
    vocab_size: int
    eos_id: int
    model: str
    reward_bounds: tuple[float, float] | None = None


class ProtocolClient:
    """HTTP client with the protocol's retry contract: transport failures
    and 5xx responses are retried up to `attempts` total tries; anything
    else surfaces immediately."""

    def __init__(self, endpoint: Endpoint,
                 transport: httpx.BaseTransport | None = None):
        self.endpoint = endpoint
        headers = {"content-type": "application/json"}
        token = endpoint.resolved_token()
        if token:
            headers["authorization"] = f"Bearer {token}"
        self._http = httpx.Client(base_url=endpoint.base_url,
                                  timeout=endpoint.timeout_ms / 1000.0,
                                  headers=headers, transport=transport)
        self._info: ProtocolInfo | None = None

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "ProtocolClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- transport ---------------------------------------------------------

    def _request(self, method: str, path: str, body: dict | None = None) -> dict:
        ep = self.endpoint
        last_exc: Exception | None = None
        for attempt in range(ep.attempts):
            if attempt:
                time.sleep(ep.backoff[min(attempt - 1, len(ep.backoff) - 1)])
            try:
                resp = self._http.request(
                    method, path,
                    content=None if body is None else canon_dumps(
                        body, allow_inf=True).encode())
            except httpx.TransportError as exc:
                last_exc = exc
                log.debug("transport failure on %s (attempt %d): %s",
                          path, attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last_exc = HttpStatusError(
                    f"HTTP {resp.status_code} on {path}",
                    status=resp.status_code, identity=ep.base_url)
                continue
            if resp.status_code != 200:
                raise HttpStatusError(f"HTTP {resp.status_code} on {path}",
                                      status=resp.status_code,
                                      identity=ep.base_url)
            try:
                parsed = json.loads(resp.text)
            except ValueError as exc:
                raise MalformedResponseError(
                    f"unparseable body from {path}: {exc}",
                    identity=ep.base_url) from exc
            if not isinstance(parsed, dict):
                raise MalformedResponseError(
                    f"expected an object from {path}, got {type(parsed).__name__}",
                    identity=ep.base_url)
            return parsed
        raise NetworkError(f"{method} {path} failed: {last_exc}",
                           attempts=ep.attempts, identity=ep.base_url)

    # -- protocol ----------------------------------------------------------

    def info(self, refresh: bool = False) -> ProtocolInfo:
        if self._info is not None and not refresh:
            return self._info
        body = self._request("GET", "/v1/info")
        try:
            version = str(body["version"])
            vocab_size = int(body["vocab_size"])
            eos_id = int(body["eos_id"])
            model = str(body["model"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponseError(
                f"/v1/info missing or mistyped field: {exc}",
                identity=self.endpoint.base_url) from exc
        if version.split(".")[0] != PROTOCOL_MAJOR:
            raise VersionMismatchError(
                f"server speaks protocol {version!r}, client supports "
                f"{PROTOCOL_MAJOR}.x", identity=self.endpoint.base_url)
        bounds = None
        if body.get("reward_bounds") is not None:
            raw = body["reward_bounds"]
            if (not isinstance(raw, (list, tuple)) or len(raw) != 2
                    or not all(isinstance(x, (int, float)) for x in raw)
                    or not float(raw[0]) < float(raw[1])):
                raise MalformedResponseError(
                    f"invalid reward_bounds {raw!r}",
                    identity=self.endpoint.base_url)
            bounds = (float(raw[0]), float(raw[1]))
        if vocab_size < 2 or not 0 <= eos_id < vocab_size:
            raise MalformedResponseError(
                f"nonsensical vocab declaration size={vocab_size} eos={eos_id}",
                identity=self.endpoint.base_url)
        self._info = ProtocolInfo(version=version, vocab_size=vocab_size,
                                  eos_id=eos_id, model=model,
                                  reward_bounds=bounds)
        return self._info

    def logprobs(self, tokens, k: int) -> TokenDistribution:
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        info = self.info()
        body = self._request("POST", "/v1/logprobs",
                             {"tokens": list(tokens), "k": int(k)})
        try:
            entries = [(int(e["token"]), float(e["logprob"]))
                       for e in body["entries"]]
            tail_logprob = float(body["tail_logprob"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponseError(
                f"/v1/logprobs malformed: {exc}",
                identity=self.endpoint.base_url) from exc
        if len(entries) > k:
            raise ProtocolConformanceError(
                f"asked for k={k}, got {len(entries)} entries",
                identity=self.endpoint.base_url)
        seen = set()
        for token, _ in entries:
            if token in seen or not 0 <= token < info.vocab_size:
                raise ProtocolConformanceError(
                    f"duplicate or out-of-vocab token {token} in logprobs",
                    identity=self.endpoint.base_url)
            seen.add(token)
        probs = {token: math.exp(lp) for token, lp in entries}
        tail = math.exp(tail_logprob)
        total = math.fsum(probs.values()) + tail
        if abs(total - 1.0) > WIRE_SUM_TOL:
            raise NormalizationError(
                f"reported probabilities sum to {total!r} (|Δ| > {WIRE_SUM_TOL})",
                identity=self.endpoint.base_url)
        probs = {t: p / total for t, p in probs.items()}
        tail /= total
        if tail < 1e-15:
            tail = 0.0
        ordered = tuple(sorted(probs.items(), key=lambda kv: (-kv[1], kv[0])))
        return TokenDistribution(entries=ordered, tail_mass=tail,
                                 complete=tail == 0.0)

    def rollout(self, tokens, n: int, max_len: int, temperature: float,
                seed: int) -> list[tuple[TokenId, ...]]:
        if n < 1:
            raise ConfigError(f"n must be >= 1, got {n}")
        if max_len < 0:
            raise ConfigError(f"max_len must be >= 0, got {max_len}")
        info = self.info()
        body = self._request("POST", "/v1/rollout", {
            "tokens": list(tokens), "n": int(n), "max_len": int(max_len),
            "temperature": float(temperature), "seed": int(seed)})
        raw = body.get("continuations")
        if not isinstance(raw, list) or len(raw) != n:
            raise RolloutContractError(
                f"expected {n} continuations, got "
                f"{len(raw) if isinstance(raw, list) else type(raw).__name__}",
                identity=self.endpoint.base_url)
        out: list[tuple[TokenId, ...]] = []
        for cont in raw:
            if not isinstance(cont, list) or not all(
                    isinstance(t, int) for t in cont):
                raise RolloutContractError(
                    f"continuation is not a token list: {cont!r}",
                    identity=self.endpoint.base_url)
            if len(cont) > max_len:
                raise RolloutContractError(
                    f"continuation length {len(cont)} exceeds max_len {max_len}",
                    identity=self.endpoint.base_url)
            for pos, t in enumerate(cont):
                if not 0 <= t < info.vocab_size:
                    raise RolloutContractError(
                        f"out-of-vocab token {t} in continuation",
                        identity=self.endpoint.base_url)
                if t == info.eos_id and pos != len(cont) - 1:
                    raise RolloutContractError(
                        "EOS appears before the end of a continuation",
                        identity=self.endpoint.base_url)
            out.append(tuple(cont))
        return out

    def reward(self, prompt, response) -> float:
        info = self.info()
        body = self._request("POST", "/v1/reward",
                             {"prompt": list(prompt), "response": list(response)})
        try:
            value = float(body["reward"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponseError(
                f"/v1/reward malformed: {exc}",
                identity=self.endpoint.base_url) from exc
        if info.reward_bounds is not None:
            lo, hi = info.reward_bounds
            if not lo - 1e-12 <= value <= hi + 1e-12:
                raise RewardBoundsError(
                    f"reward {value} outside declared bounds [{lo}, {hi}]",
                    identity=self.endpoint.base_url)
        return value


# --- module-level convenience (ephemeral client unless one is passed) ---

def _with_client(ep: Endpoint, client: ProtocolClient | None):
    return (client, False) if client is not None else (ProtocolClient(ep), True)


def fetch_vocab(ep: Endpoint, client: ProtocolClient | None = None) -> ProtocolInfo:
    c, own = _with_client(ep, client)
    try:
        return c.info()
    finally:
        if own:
            c.close()


def fetch_topk_logprobs(ep: Endpoint, tokens, k: int,
                        client: ProtocolClient | None = None) -> TokenDistribution:
    c, own = _with_client(ep, client)
    try:
        return c.logprobs(tokens, k)
    finally:
        if own:
            c.close()


def fetch_rollouts(ep: Endpoint, tokens, n: int, max_len: int,
                   temperature: float = 1.0, seed: int = 0,
                   client: ProtocolClient | None = None) -> list[tuple[TokenId, ...]]:
    c, own = _with_client(ep, client)
    try:
        return c.rollout(tokens, n, max_len, temperature, seed)
    finally:
        if own:
            c.close()


def fetch_reward(ep: Endpoint, prompt, response,
                 client: ProtocolClient | None = None) -> float:
    c, own = _with_client(ep, client)
    try:
        return c.reward(prompt, response)
    finally:
        if own:
            c.close()


# --- engine-facing adapters ---

class RemoteAgentPolicy(AgentPolicy):
    """An AgentPolicy backed by a protocol server.

    Truncated reports mean exact full-support enumeration is unavailable,
    so the exact-DP estimator refuses these agents (exact_capable False)
    and Q estimation falls back to Monte-Carlo rollouts over the wire.
    """

    exact_capable = False

    def __init__(self, endpoint: Endpoint,
                 client: ProtocolClient | None = None):
        self.endpoint = endpoint
        self.client = client or ProtocolClient(endpoint)
        info = self.client.info()
        self.info = info
        self.vocab = Vocab(size=info.vocab_size, eos_id=info.eos_id)
        self._name = info.model
        self._id = "remote-" + stable_digest(
            f"{endpoint.base_url}|{info.model}".encode())

    @property
    def name(self) -> str:
        return self._name

    @property
    def agent_id(self) -> str:
        return self._id

    def distribution(self, state: State, want_top: int | None = None) -> TokenDistribution:
        k = want_top if want_top is not None else self.vocab.size
        return self.client.logprobs(state.context, k)

    def rollouts(self, state: State, z: TokenId, n: int, max_len: int,
                 seed: int) -> list[Trajectory]:
        conts = self.client.rollout(state.context + (z,), n, max_len,
                                    temperature=1.0, seed=seed)
        return [Trajectory(tokens=c, logprob_under=None) for c in conts]


class RemoteRewardModel(RewardModel):
    """A RewardModel backed by a protocol server with declared bounds."""

    def __init__(self, endpoint: Endpoint,
                 client: ProtocolClient | None = None):
        self.endpoint = endpoint
        self.client = client or ProtocolClient(endpoint)
        info = self.client.info()
        if info.reward_bounds is None:
            raise ConfigError(
                f"server {endpoint.base_url} declares no reward_bounds; "
                "cannot be used as a reward model")
        self._bounds = info.reward_bounds
        self._name = info.model
        self._id = "remote-" + stable_digest(
            f"{endpoint.base_url}|{info.model}|reward".encode())

    @property
    def name(self) -> str:
        return self._name

    @property
    def reward_id(self) -> str:
        return self._id

    @property
    def bounds(self) -> tuple[float, float]:
        return self._bounds

    def score(self, prompt, response) -> float:
        return self.client.reward(prompt, response)


# --- conformance suite ---

@dataclass(frozen=True)
class ConformanceCheck:
    name: str
    passed: bool
    detail: str = ""
    error_kind: str | None = None
    skipped: bool = False

    def to_obj(self) -> dict:
        return {"name": self.name, "passed": self.passed,
                "detail": self.detail, "error_kind": self.error_kind,
                "skipped": self.skipped}


@dataclass(frozen=True)
class ConformanceReport:
    endpoint: str
    checks: tuple[ConformanceCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed or c.skipped for c in self.checks)

    def to_obj(self) -> dict:
        return {"endpoint": self.endpoint, "passed": self.passed,
                "checks": [c.to_obj() for c in self.checks]}

    def dumps(self) -> str:
        return canon_dumps(self.to_obj())


def _check(name: str, fn) -> ConformanceCheck:
    try:
        detail = fn()
    except NetworkError:
        raise  # unreachable server is not a conformance verdict
    except Exception as exc:  # noqa: BLE001 — every kind becomes a verdict
        return ConformanceCheck(name=name, passed=False, detail=str(exc),
                                error_kind=type(exc).__name__)
    return ConformanceCheck(name=name, passed=True, detail=detail or "")


def run_conformance(ep: Endpoint, client: ProtocolClient | None = None) -> ConformanceReport:
    """Exercise every protocol contract against a live endpoint.

    Network unreachability raises NetworkError (it is an availability
    problem, not a conformance verdict); contract violations land in the
    report with their declared error kinds.
    """
    c, own = _with_client(ep, client)
    checks: list[ConformanceCheck] = []
    try:
        checks.append(_check("info-well-formed", lambda: _ck_info(c)))
        info = c.info() if checks[-1].passed else None
        if info is None:
            return ConformanceReport(endpoint=ep.base_url, checks=tuple(checks))

        first = next(t for t in range(info.vocab_size) if t != info.eos_id)
        contexts = [[], [first], [first, first]]
        ks = sorted({1, 2, info.vocab_size, info.vocab_size + 5})
        checks.append(_check(
            "logprobs-normalized",
            lambda: _ck_logprobs(c, contexts, ks)))
        checks.append(_check(
            "rollout-contract",
            lambda: _ck_rollout(c, [first], n=3, max_len=4, seed=7)))
        checks.append(_check(
            "rollout-seed-determinism",
            lambda: _ck_rollout_determinism(c, [first], n=2, max_len=4, seed=11)))
        if info.reward_bounds is None:
            checks.append(ConformanceCheck(
                name="reward-bounds", passed=True, skipped=True,
                detail="no reward_bounds declared; reward checks skipped"))
        else:
            checks.append(_check(
                "reward-bounds",
                lambda: _ck_reward(c, info, first)))
        return ConformanceReport(endpoint=ep.base_url, checks=tuple(checks))
    finally:
        if own:
            c.close()


def _ck_info(c: ProtocolClient) -> str:
    info = c.info(refresh=True)
    return (f"version={info.version} vocab={info.vocab_size} "
            f"eos={info.eos_id} model={info.model}")


def _ck_logprobs(c: ProtocolClient, contexts, ks) -> str:
    n = 0
    for ctx in contexts:
        for k in ks:
            dist = c.logprobs(ctx, k)  # client validates normalization/shape
            if len(dist.entries) > k:
                raise ProtocolConformanceError(
                    f"{len(dist.entries)} entries for k={k}")
            n += 1
    return f"{n} (context, k) reports validated"


def _ck_rollout(c: ProtocolClient, tokens, n: int, max_len: int, seed: int) -> str:
    conts = c.rollout(tokens, n, max_len, temperature=1.0, seed=seed)
    return f"{len(conts)} continuations within contract"


def _ck_rollout_determinism(c: ProtocolClient, tokens, n: int, max_len: int,
                            seed: int) -> str:
    a = c.rollout(tokens, n, max_len, temperature=1.0, seed=seed)
    b = c.rollout(tokens, n, max_len, temperature=1.0, seed=seed)
    if a != b:
        raise RolloutContractError(
            f"identical seeded requests disagree: {a} vs {b}",
            identity=c.endpoint.base_url)
    return "repeated seeded request is reproducible"


def _ck_reward(c: ProtocolClient, info: ProtocolInfo, first: TokenId) -> str:
    pairs = [([first], [first]), ([first], [info.eos_id]), ([first], [])]
    for prompt, response in pairs:
        c.reward(prompt, response)  # client validates bounds
    r1 = c.reward([first], [first])
    r2 = c.reward([first], [first])
    if r1 != r2:
        raise ProtocolConformanceError(
            f"reward is not deterministic: {r1} vs {r2}",
            identity=c.endpoint.base_url)
    return f"{len(pairs)} scored pairs in bounds, deterministic"
