"""Wire-protocol client, remote-backed agents/rewards, the bundled mock
server, and the conformance suite."""

from __future__ import annotations

import json
import math

import httpx
import pytest

from collabdec import (AgentPool, ConfigError, DecoderConfig, NetworkError,
                       RolloutConfig, Vocab, collab_decode, keyword_reward)
from collabdec.errors import (HttpStatusError, MalformedResponseError,
                              NormalizationError, ProtocolConformanceError,
                              RewardBoundsError, RolloutContractError,
                              VersionMismatchError)
from collabdec.mockserver import KNOWN_FAULTS, MockServer, build_mock_app
from collabdec.remote import (Endpoint, ProtocolClient, RemoteAgentPolicy,
                              RemoteRewardModel, fetch_reward, fetch_rollouts,
                              fetch_topk_logprobs, fetch_vocab,
                              run_conformance)

from conftest import A, B, EOS, flat_tabular, state_of

pytestmark = pytest.mark.filterwarnings("ignore::DeprecationWarning")


@pytest.fixture(scope="module")
def vocab():
    return Vocab(size=3, eos_id=EOS)


@pytest.fixture(scope="module")
def policy(vocab):
    # conformance rollouts (max_len=4 from a length-1 context) reach
    # length-4 contexts, so the table needs rows past the default horizon
    return flat_tabular(vocab, {A: 0.5, B: 0.3, EOS: 0.2}, horizon=6,
                        name="served")


@pytest.fixture(scope="module")
def reward(vocab):
    return keyword_reward(vocab, [B], w=0.5)


@pytest.fixture(scope="module")
def server(policy, reward):
    with MockServer(policy, reward) as srv:
        yield srv


class TestFetchOperations:
    def test_info(self, server, vocab):
        info = fetch_vocab(server.endpoint())
        assert info.version == "1.0"
        assert info.vocab_size == vocab.size and info.eos_id == vocab.eos_id
        assert info.reward_bounds == (0.0, 1.0)

    def test_pinned_logprobs(self, server):
        # served row {A: ln 0.5, B: ln 0.3, tail: ln 0.2}
        dist = fetch_topk_logprobs(server.endpoint(), [], k=2)
        assert [z for z, _ in dist.entries] == [A, B]
        assert dist.entries[0][1] == pytest.approx(0.5, abs=1e-9)
        assert dist.entries[1][1] == pytest.approx(0.3, abs=1e-9)
        assert dist.tail_mass == pytest.approx(0.2, abs=1e-9)
        assert not dist.complete

    def test_full_vocab_request_is_complete(self, server):
        dist = fetch_topk_logprobs(server.endpoint(), [], k=3)
        assert dist.complete and dist.tail_mass == 0.0

    def test_rollouts_deterministic_per_seed(self, server):
        ep = server.endpoint()
        r1 = fetch_rollouts(ep, [A], n=4, max_len=3, seed=9)
        r2 = fetch_rollouts(ep, [A], n=4, max_len=3, seed=9)
        r3 = fetch_rollouts(ep, [A], n=4, max_len=3, seed=10)
        assert r1 == r2 and r1 != r3
        for cont in r1:
            assert len(cont) <= 3
            assert EOS not in cont[:-1]

    def test_reward(self, server):
        got = fetch_reward(server.endpoint(), [], [B, EOS])
        assert got == pytest.approx(0.5, abs=1e-12)

    def test_empty_response_scored(self, server):
        assert fetch_reward(server.endpoint(), [A], []) == 0.0


class TestProtocolClientValidation:
    def _client(self, handler) -> ProtocolClient:
        transport = httpx.MockTransport(handler)
        return ProtocolClient(Endpoint(base_url="http://test",
                                       attempts=3, backoff=(0.0, 0.0)),
                              transport=transport)

    def test_retries_then_succeeds(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] <= 2:
                return httpx.Response(503, text="busy")
            return httpx.Response(200, json={
                "version": "1.0", "vocab_size": 3, "eos_id": 2,
                "model": "m"})

        info = self._client(handler).info()
        assert calls["n"] == 3 and info.model == "m"

    def test_exhausted_retries_raise_network_error(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            return httpx.Response(500, text="down")

        with pytest.raises(NetworkError) as err:
            self._client(handler).info()
        assert calls["n"] == 3
        assert err.value.attempts == 3

    def test_transport_errors_also_retry(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] == 1:
                raise httpx.ConnectError("refused")
            return httpx.Response(200, json={
                "version": "1.0", "vocab_size": 3, "eos_id": 2,
                "model": "m"})

        assert self._client(handler).info().vocab_size == 3

    def test_client_errors_do_not_retry(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            return httpx.Response(404, text="nope")

        with pytest.raises(HttpStatusError) as err:
            self._client(handler).info()
        assert calls["n"] == 1 and err.value.status == 404

    def test_version_major_mismatch(self):
        def handler(request):
            return httpx.Response(200, json={
                "version": "2.0", "vocab_size": 3, "eos_id": 2, "model": "m"})

        with pytest.raises(VersionMismatchError):
            self._client(handler).info()

    def test_minor_version_accepted(self):
        def handler(request):
            return httpx.Response(200, json={
                "version": "1.7", "vocab_size": 3, "eos_id": 2, "model": "m"})

        assert self._client(handler).info().version == "1.7"

    def test_malformed_body(self):
        def handler(request):
            return httpx.Response(200, text="not json {")

        with pytest.raises(MalformedResponseError):
            self._client(handler).info()

    def _info_then(self, payload):
        def handler(request):
            if request.url.path == "/v1/info":
                return httpx.Response(200, json={
                    "version": "1.0", "vocab_size": 3, "eos_id": 2,
                    "model": "m"})
            return httpx.Response(200, json=payload)

        return self._client(handler)

    def test_bad_normalization_rejected(self):
        c = self._info_then({
            "entries": [{"token": 0, "logprob": math.log(0.6)},
                        {"token": 1, "logprob": math.log(0.6)}],
            "tail_logprob": "-1e999"})
        with pytest.raises(NormalizationError):
            c.logprobs([], k=2)

    def test_tiny_wire_drift_renormalized(self):
        # 3e-7 total drift is within the wire tolerance; the client must
        # return an exactly normalized distribution.
        c = self._info_then({
            "entries": [{"token": 0, "logprob": math.log(0.5 + 3e-7)},
                        {"token": 1, "logprob": math.log(0.5)}],
            "tail_logprob": "-1e999"})
        dist = c.logprobs([], k=2)
        total = sum(p for _, p in dist.entries) + dist.tail_mass
        assert abs(total - 1.0) <= 1e-9

    def test_duplicate_tokens_rejected(self):
        c = self._info_then({
            "entries": [{"token": 0, "logprob": math.log(0.5)},
                        {"token": 0, "logprob": math.log(0.5)}],
            "tail_logprob": "-1e999"})
        with pytest.raises(ProtocolConformanceError):
            c.logprobs([], k=2)

    def test_out_of_vocab_token_rejected(self):
        c = self._info_then({
            "entries": [{"token": 9, "logprob": 0.0}],
            "tail_logprob": "-1e999"})
        with pytest.raises(ProtocolConformanceError):
            c.logprobs([], k=1)

    def test_eos_mid_continuation_rejected(self):
        c = self._info_then({"continuations": [[0, 2, 0]]})
        with pytest.raises(RolloutContractError):
            c.rollout([], n=1, max_len=3, temperature=1.0, seed=0)

    def test_overlong_continuation_rejected(self):
        c = self._info_then({"continuations": [[0, 0, 0, 0]]})
        with pytest.raises(RolloutContractError):
            c.rollout([], n=1, max_len=3, temperature=1.0, seed=0)

    def test_wrong_continuation_count_rejected(self):
        c = self._info_then({"continuations": [[0]]})
        with pytest.raises(RolloutContractError):
            c.rollout([], n=2, max_len=3, temperature=1.0, seed=0)


class TestRemoteAgentDifferential:
    def test_distribution_matches_local_table(self, server, policy, vocab):
        remote = RemoteAgentPolicy(server.endpoint())
        st8 = state_of(vocab, generated=(A,))
        local = policy.distribution(st8).as_dict()
        got = remote.distribution(st8).as_dict()
        # exp(log p) round-trips within an ulp, not exactly
        for z, p in local.items():
            assert got[z] == pytest.approx(p, abs=1e-12)

    def test_rollouts_bit_identical_to_local(self, server, policy, vocab):
        remote = RemoteAgentPolicy(server.endpoint())
        st8 = state_of(vocab)
        loc = policy.rollouts(st8, A, 5, 3, seed=21)
        rem = remote.rollouts(st8, A, 5, 3, seed=21)
        assert [t.tokens for t in loc] == [t.tokens for t in rem]

    def test_decode_bit_identical_to_local(self, server, policy, vocab,
                                           reward):
        cfg = DecoderConfig(alpha=0.5, top_k=3, max_new_tokens=3, seed=0,
                            q_estimator="mc")
        rcfg = RolloutConfig(n_rollouts=16, seed=4)
        remote = RemoteAgentPolicy(server.endpoint())
        t_loc = collab_decode(AgentPool.build([policy], 0), reward, (), cfg,
                              rcfg)
        t_rem = collab_decode(AgentPool.build([remote], 0), reward, (), cfg,
                              rcfg)
        assert t_loc.output == t_rem.output
        assert [s.chosen_agent for s in t_loc.steps] == \
            [s.chosen_agent for s in t_rem.steps]

    def test_remote_agent_is_not_exact_capable(self, server):
        remote = RemoteAgentPolicy(server.endpoint())
        assert not remote.exact_capable

    def test_vocab_mismatch_blocks_pooling(self, server):
        remote = RemoteAgentPolicy(server.endpoint())
        v4 = Vocab(size=4, eos_id=3)
        from collabdec import UniformPolicy
        with pytest.raises(ConfigError):
            AgentPool.build([remote, UniformPolicy(v4)], ref_agent=0)


class TestRemoteReward:
    def test_scores_match_local(self, server, reward):
        rm = RemoteRewardModel(server.endpoint())
        assert rm.bounds == (0.0, 1.0)
        for resp in [(B, EOS), (A, EOS), (B, B, EOS)]:
            assert rm.score((), resp) == pytest.approx(
                reward.score((), resp), abs=1e-12)

    def test_reward_out_of_bounds_detected(self, policy, reward):
        with MockServer(policy, reward,
                        faults=("reward_out_of_bounds",)) as bad:
            rm = RemoteRewardModel(bad.endpoint())
            with pytest.raises(RewardBoundsError):
                rm.score((), (A, EOS))

    def test_requires_declared_bounds(self, policy):
        with MockServer(policy, reward=None) as srv:
            with pytest.raises(ConfigError):
                RemoteRewardModel(srv.endpoint())


class TestMockServerSurface:
    def test_unknown_fault_rejected(self, policy):
        with pytest.raises(ValueError):
            build_mock_app(policy, faults=("gremlins",))
        assert KNOWN_FAULTS == {"bad_normalization", "reward_out_of_bounds",
                                "nondeterministic_rollout"}

    def test_rollout_from_eos_context_is_empty(self, server):
        got = fetch_rollouts(server.endpoint(), [A, EOS], n=2, max_len=4,
                             seed=0)
        assert list(got) == [(), ()]

    def test_auth_required_when_token_set(self, policy, monkeypatch):
        monkeypatch.delenv("COLLAB_API_TOKEN", raising=False)
        with MockServer(policy, auth_token="sesame") as srv:
            with pytest.raises(HttpStatusError) as err:
                fetch_vocab(Endpoint(base_url=srv.base_url))
            assert err.value.status == 401
            assert fetch_vocab(srv.endpoint()).model == "mock"

    def test_auth_token_from_environment(self, policy, monkeypatch):
        with MockServer(policy, auth_token="sesame") as srv:
            monkeypatch.setenv("COLLAB_API_TOKEN", "sesame")
            assert fetch_vocab(Endpoint(base_url=srv.base_url)).model == "mock"

    def test_validation_error_is_4xx(self, server):
        with httpx.Client(base_url=server.base_url) as c:
            resp = c.post("/v1/logprobs", json={"tokens": [], "k": 0})
            assert 400 <= resp.status_code < 500


class TestConformance:
    def test_clean_mock_passes(self, server):
        report = run_conformance(server.endpoint())
        assert report.passed
        names = [c.name for c in report.checks]
        assert names == ["info-well-formed", "logprobs-normalized",
                         "rollout-contract", "rollout-seed-determinism",
                         "reward-bounds"]
        assert all(c.error_kind is None for c in report.checks)
        assert json.loads(report.dumps())["passed"] is True

    def test_reward_check_skipped_without_reward_model(self, policy):
        with MockServer(policy) as srv:
            report = run_conformance(srv.endpoint())
            assert report.passed
            by_name = {c.name: c for c in report.checks}
            assert by_name["reward-bounds"].skipped

    @pytest.mark.parametrize("fault,check_name,kind", [
        ("bad_normalization", "logprobs-normalized", "NormalizationError"),
        ("nondeterministic_rollout", "rollout-seed-determinism",
         "RolloutContractError"),
        ("reward_out_of_bounds", "reward-bounds", "RewardBoundsError"),
    ])
    def test_broken_mocks_fail_with_declared_kind(self, policy, reward,
                                                  fault, check_name, kind):
        with MockServer(policy, reward, faults=(fault,)) as bad:
            report = run_conformance(bad.endpoint())
            assert not report.passed
            by_name = {c.name: c for c in report.checks}
            assert not by_name[check_name].passed
            assert by_name[check_name].error_kind == kind

    def test_unreachable_endpoint_is_a_network_error(self):
        ep = Endpoint(base_url="http://127.0.0.1:9", timeout_ms=200,
                      attempts=2, backoff=(0.0,))
        with pytest.raises(NetworkError):
            run_conformance(ep)
