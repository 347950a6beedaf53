"""In-process protocol v1.0 server over toy policies, for hermetic tests.

The rollout handler samples through the same `sample_continuation` code
path as local agents (with the same per-continuation seed derivation), so
an engine driving this server over HTTP is bit-identical to one holding
the underlying policy directly.

Fault injection (for negative tests of the conformance suite):
  bad_normalization       — logprob reports scaled off by 2e-3
  reward_out_of_bounds    — rewards shifted above the declared upper bound
  nondeterministic_rollout — a hidden counter perturbs every rollout seed
"""

from __future__ import annotations

import logging
import math
import threading
import time
from typing import Iterable

import numpy as np
import uvicorn
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .core import State, TokenId, derive_seed
from .errors import CollabError
from .policy import AgentPolicy, sample_continuation
from .remote import PROTOCOL_MAJOR, Endpoint
from .reward import RewardModel
from .serialize import canon_dumps

log = logging.getLogger(__name__)

KNOWN_FAULTS = frozenset(
    {"bad_normalization", "reward_out_of_bounds", "nondeterministic_rollout"})


class _LogprobsRequest(BaseModel):
    tokens: list[int]
    k: int = Field(ge=1)


class _RolloutRequest(BaseModel):
    tokens: list[int]
    n: int = Field(ge=1)
    max_len: int = Field(ge=0)
    temperature: float = Field(ge=0.0)
    seed: int


class _RewardRequest(BaseModel):
    prompt: list[int]
    response: list[int]


def _wire(payload: dict) -> Response:
    # canonical float text (17 significant digits, ±1e999 for infinities)
    return Response(content=canon_dumps(payload, allow_inf=True),
                    media_type="application/json")


def build_mock_app(policy: AgentPolicy, reward: RewardModel | None = None,
                   *, model_name: str = "mock",
                   faults: Iterable[str] = (),
                   auth_token: str | None = None) -> FastAPI:
    faults = frozenset(faults)
    unknown = faults - KNOWN_FAULTS
    if unknown:
        raise ValueError(f"unknown fault(s): {sorted(unknown)}")
    app = FastAPI(title="mock protocol server", docs_url=None, redoc_url=None)
    vocab = policy.vocab
    rollout_counter = {"n": 0}

    @app.middleware("http")
    async def _auth(request: Request, call_next):
        if auth_token is not None:
            supplied = request.headers.get("authorization", "")
            if supplied != f"Bearer {auth_token}":
                return JSONResponse({"error": "unauthorized"}, status_code=401)
        return await call_next(request)

    @app.exception_handler(CollabError)
    async def _domain_error(request: Request, exc: CollabError):
        return JSONResponse({"error": type(exc).__name__, "detail": str(exc)},
                            status_code=400)

    @app.get("/v1/info")
    def info() -> Response:
        payload = {
            "version": f"{PROTOCOL_MAJOR}.0",
            "vocab_size": vocab.size,
            "eos_id": vocab.eos_id,
            "model": model_name,
        }
        if reward is not None:
            payload["reward_bounds"] = list(reward.bounds)
        return _wire(payload)

    @app.post("/v1/logprobs")
    def logprobs(req: _LogprobsRequest) -> Response:
        state = State(vocab, tuple(req.tokens), (), False)
        dist = policy.distribution(state, None)
        top = dist.entries[:req.k]
        kept = math.fsum(p for _, p in top)
        tail = max(0.0, 1.0 - kept)
        scale = 1.002 if "bad_normalization" in faults else 1.0
        entries = [{"token": z, "logprob": math.log(p * scale)}
                   for z, p in top if p > 0.0]
        tail_logprob = math.log(tail * scale) if tail > 0.0 else -math.inf
        return _wire({"entries": entries, "tail_logprob": tail_logprob})

    @app.post("/v1/rollout")
    def rollout(req: _RolloutRequest) -> Response:
        seed = req.seed
        if "nondeterministic_rollout" in faults:
            rollout_counter["n"] += 1
            seed = derive_seed(seed, "drift", rollout_counter["n"])
        ctx = tuple(req.tokens)
        conts: list[list[int]] = []
        for i in range(req.n):
            if ctx and ctx[-1] == vocab.eos_id:
                conts.append([])  # nothing follows EOS
                continue
            rng = np.random.default_rng(derive_seed(seed, i))
            tokens, _ = sample_continuation(policy, ctx, (), req.max_len, rng,
                                            temperature=req.temperature)
            conts.append(list(tokens))
        return _wire({"continuations": conts})

    @app.post("/v1/reward")
    def score(req: _RewardRequest) -> Response:
        if reward is None:
            return JSONResponse({"error": "no reward model served"},
                                status_code=404)
        value = reward.score(tuple(req.prompt), tuple(req.response))
        if "reward_out_of_bounds" in faults:
            value = reward.bounds[1] + 0.5
        return _wire({"reward": value})

    return app


class MockServer:
    """A live uvicorn thread serving a mock app on an ephemeral local port.

    Use as a context manager; `endpoint()` yields a ready-to-use Endpoint.
    """

    def __init__(self, policy: AgentPolicy, reward: RewardModel | None = None,
                 *, model_name: str = "mock", faults: Iterable[str] = (),
                 auth_token: str | None = None):
        self.app = build_mock_app(policy, reward, model_name=model_name,
                                  faults=faults, auth_token=auth_token)
        self.auth_token = auth_token
        config = uvicorn.Config(self.app, host="127.0.0.1", port=0,
                                log_level="error", access_log=False)
        self._server = uvicorn.Server(config)
        self._thread: threading.Thread | None = None

    def start(self, timeout: float = 10.0) -> "MockServer":
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("mock server failed to start in time")
            if not self._thread.is_alive():
                raise RuntimeError("mock server thread died during startup")
            time.sleep(0.01)
        return self

    @property
    def port(self) -> int:
        servers = self._server.servers
        if not servers or not servers[0].sockets:
            raise RuntimeError("mock server is not running")
        return servers[0].sockets[0].getsockname()[1]

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def endpoint(self, **overrides) -> Endpoint:
        kwargs = {"base_url": self.base_url, "auth_token": self.auth_token}
        kwargs.update(overrides)
        return Endpoint(**kwargs)

    def stop(self) -> None:
        self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=10.0)
            self._thread = None

    def __enter__(self) -> "MockServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
