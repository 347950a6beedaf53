"""Shared fixtures: tiny on-disk checkpoints built once per session, the
loaded models, in-process test clients, and live loopback servers."""

from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from pyserver import (ModelSpec, ServedModel, ServerHandle, build_app,
                      make_tiny_checkpoint)

VOCAB = 12
EOS = VOCAB - 1
BOUNDS = (-10.0, 10.0)
POSITIONS = 48


@pytest.fixture(scope="session")
def checkpoints(tmp_path_factory) -> dict[str, str]:
    root = tmp_path_factory.mktemp("checkpoints")
    built = {}
    for name, role, seed, vocab in [
        ("policy_a", "policy", 11, VOCAB),
        ("policy_b", "policy", 22, VOCAB),
        ("reward", "reward", 33, VOCAB),
        ("policy_small", "policy", 44, 8),
    ]:
        built[name] = make_tiny_checkpoint(
            str(root / name), role, seed=seed, vocab_size=vocab,
            n_positions=POSITIONS)
    return built


@pytest.fixture(scope="session")
def policy_a(checkpoints) -> ServedModel:
    return ServedModel.load(
        ModelSpec(checkpoint=checkpoints["policy_a"], role="policy"))


@pytest.fixture(scope="session")
def policy_b(checkpoints) -> ServedModel:
    return ServedModel.load(
        ModelSpec(checkpoint=checkpoints["policy_b"], role="policy"))


@pytest.fixture(scope="session")
def policy_small(checkpoints) -> ServedModel:
    return ServedModel.load(
        ModelSpec(checkpoint=checkpoints["policy_small"], role="policy"))


@pytest.fixture(scope="session")
def reward_model(checkpoints) -> ServedModel:
    return ServedModel.load(
        ModelSpec(checkpoint=checkpoints["reward"], role="reward",
                  bounds=BOUNDS))


@pytest.fixture(scope="session")
def client_policy(policy_a) -> TestClient:
    return TestClient(build_app(policy=policy_a))


@pytest.fixture(scope="session")
def client_full(policy_a, reward_model) -> TestClient:
    return TestClient(build_app(policy=policy_a, reward=reward_model))


@pytest.fixture(scope="session")
def client_reward_only(reward_model) -> TestClient:
    return TestClient(build_app(reward=reward_model))


@pytest.fixture(scope="session")
def live_a(policy_a):
    with ServerHandle(build_app(policy=policy_a)) as handle:
        yield handle


@pytest.fixture(scope="session")
def live_b(policy_b):
    with ServerHandle(build_app(policy=policy_b)) as handle:
        yield handle


@pytest.fixture(scope="session")
def live_full(policy_a, reward_model):
    with ServerHandle(build_app(policy=policy_a, reward=reward_model)) as handle:
        yield handle


@pytest.fixture(scope="session")
def live_reward(reward_model):
    with ServerHandle(build_app(reward=reward_model)) as handle:
        yield handle
