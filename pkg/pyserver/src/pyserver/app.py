"""The HTTP surface: protocol v1.0 endpoints over loaded checkpoints.

One app serves at most one policy model (/v1/logprobs, /v1/rollout) and
at most one reward model (/v1/reward); /v1/info declares the vocabulary
they share and the reward bounds when a reward model is present.  Asking
a route whose model is not served answers 404; requests outside the
contract answer 400 with a structured error body.
"""

from __future__ import annotations

import logging
import threading
import time

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .config import ServerConfig
from .errors import RequestError, ServerConfigError
from .models import ServedModel
from .wire import PROTOCOL_VERSION, wire_response

log = logging.getLogger(__name__)


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


def build_app(policy: ServedModel | None = None,
              reward: ServedModel | None = None,
              *, model_name: str | None = None) -> FastAPI:
    if policy is None and reward is None:
        raise ServerConfigError("nothing to serve: no policy, no reward")
    if policy is not None and reward is not None:
        if (policy.vocab_size, policy.eos_id) != (reward.vocab_size,
                                                  reward.eos_id):
            raise ServerConfigError(
                f"served models disagree on the vocabulary: policy declares "
                f"size={policy.vocab_size} eos={policy.eos_id}, reward "
                f"declares size={reward.vocab_size} eos={reward.eos_id}")
    anchor = policy if policy is not None else reward
    name = model_name or "+".join(
        m.name for m in (policy, reward) if m is not None)

    app = FastAPI(title="pyserver", docs_url=None, redoc_url=None)

    @app.exception_handler(RequestError)
    async def _bad_request(request: Request, exc: RequestError):
        return JSONResponse({"error": type(exc).__name__, "detail": str(exc)},
                            status_code=400)

    @app.get("/v1/info")
    def info():
        payload = {
            "version": PROTOCOL_VERSION,
            "vocab_size": anchor.vocab_size,
            "eos_id": anchor.eos_id,
            "model": name,
        }
        if reward is not None:
            payload["reward_bounds"] = list(reward.spec.bounds)
        return wire_response(payload)

    @app.post("/v1/logprobs")
    def logprobs(req: _LogprobsRequest):
        if policy is None:
            return JSONResponse({"error": "no policy model served"},
                                status_code=404)
        entries, tail = policy.topk_report(req.tokens, req.k)
        return wire_response({
            "entries": [{"token": z, "logprob": lp} for z, lp in entries],
            "tail_logprob": tail,
        })

    @app.post("/v1/rollout")
    def rollout(req: _RolloutRequest):
        if policy is None:
            return JSONResponse({"error": "no policy model served"},
                                status_code=404)
        conts = policy.rollout(req.tokens, req.n, req.max_len,
                               req.temperature, req.seed)
        return wire_response({"continuations": conts})

    @app.post("/v1/reward")
    def score(req: _RewardRequest):
        if reward is None:
            return JSONResponse({"error": "no reward model served"},
                                status_code=404)
        return wire_response(
            {"reward": reward.reward_score(req.prompt, req.response)})

    return app


def app_from_config(cfg: ServerConfig) -> FastAPI:
    """Load every configured checkpoint (startup failures surface here,
    before any port is bound) and assemble the app."""
    policy_spec = cfg.by_role("policy")
    reward_spec = cfg.by_role("reward")
    policy = ServedModel.load(policy_spec) if policy_spec else None
    reward = ServedModel.load(reward_spec) if reward_spec else None
    return build_app(policy, reward)


def serve(cfg: ServerConfig, *, log_level: str = "info") -> None:
    """Blocking entry point: load, then bind and serve."""
    import uvicorn
    app = app_from_config(cfg)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level=log_level)


class ServerHandle:
    """A live uvicorn thread serving an app on an ephemeral local port."""

    def __init__(self, app: FastAPI, *, host: str = "127.0.0.1",
                 port: int = 0):
        import uvicorn
        self.app = app
        self._server = uvicorn.Server(uvicorn.Config(
            app, host=host, port=port, log_level="error", access_log=False))
        self._thread: threading.Thread | None = None

    def start(self, timeout: float = 20.0) -> "ServerHandle":
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server failed to start in time")
            if not self._thread.is_alive():
                raise RuntimeError("server thread died during startup")
            time.sleep(0.01)
        return self

    @property
    def port(self) -> int:
        servers = self._server.servers
        if not servers or not servers[0].sockets:
            raise RuntimeError("server is not running")
        return servers[0].sockets[0].getsockname()[1]

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def stop(self) -> None:
        self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=10.0)
            self._thread = None

    def __enter__(self) -> "ServerHandle":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
