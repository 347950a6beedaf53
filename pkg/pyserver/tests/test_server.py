"""Protocol behavior over the HTTP surface, via in-process test clients."""

from __future__ import annotations

import json
import math

import pytest

from conftest import BOUNDS, EOS, POSITIONS, VOCAB
from pyserver.wire import format_float


class TestInfo:
    def test_policy_info_echoes_tokenizer(self, client_policy):
        body = client_policy.get("/v1/info").json()
        assert body["version"] == "1.0"
        assert body["vocab_size"] == VOCAB
        assert body["eos_id"] == EOS
        assert body["model"] == "policy_a"
        assert "reward_bounds" not in body

    def test_full_server_declares_bounds(self, client_full):
        body = client_full.get("/v1/info").json()
        assert body["reward_bounds"] == [BOUNDS[0], BOUNDS[1]]
        assert body["model"] == "policy_a+reward"

    def test_reward_only_info_uses_reward_tokenizer(self, client_reward_only):
        body = client_reward_only.get("/v1/info").json()
        assert body["vocab_size"] == VOCAB
        assert body["eos_id"] == EOS
        assert body["reward_bounds"] == [BOUNDS[0], BOUNDS[1]]


class TestLogprobs:
    def _post(self, client, tokens, k):
        resp = client.post("/v1/logprobs", json={"tokens": tokens, "k": k})
        assert resp.status_code == 200, resp.text
        return resp

    def test_k_entries_plus_tail_sum_to_one(self, client_policy):
        body = self._post(client_policy, [0, 1], 5).json()
        assert len(body["entries"]) == 5
        total = math.fsum(math.exp(e["logprob"]) for e in body["entries"])
        total += math.exp(body["tail_logprob"])
        assert abs(total - 1.0) <= 1e-6

    def test_entries_descending_unique_in_vocab(self, client_policy):
        body = self._post(client_policy, [3], 6).json()
        lps = [e["logprob"] for e in body["entries"]]
        assert lps == sorted(lps, reverse=True)
        tokens = [e["token"] for e in body["entries"]]
        assert len(set(tokens)) == len(tokens)
        assert all(0 <= t < VOCAB for t in tokens)

    def test_full_vocab_request_clamps_tail(self, client_policy):
        resp = self._post(client_policy, [0], VOCAB)
        assert len(resp.json()["entries"]) == VOCAB
        assert "-1e999" in resp.text  # tail of a complete report is -inf
        assert resp.json()["tail_logprob"] == -math.inf

    def test_k_beyond_vocab_caps_at_vocab(self, client_policy):
        body = self._post(client_policy, [0], VOCAB + 7).json()
        assert len(body["entries"]) == VOCAB

    def test_empty_context_is_a_valid_query(self, client_policy):
        body = self._post(client_policy, [], 3).json()
        assert len(body["entries"]) == 3

    def test_out_of_vocab_token_is_structured_400(self, client_policy):
        resp = client_policy.post("/v1/logprobs",
                                  json={"tokens": [VOCAB + 3], "k": 2})
        assert resp.status_code == 400
        body = resp.json()
        assert body["error"] == "TokenRangeError"
        assert str(VOCAB + 3) in body["detail"]

    def test_overlong_context_is_structured_400(self, client_policy):
        resp = client_policy.post(
            "/v1/logprobs", json={"tokens": [0] * (POSITIONS + 5), "k": 2})
        assert resp.status_code == 400
        assert resp.json()["error"] == "ContextLengthError"

    def test_absent_on_reward_only_server(self, client_reward_only):
        resp = client_reward_only.post("/v1/logprobs",
                                       json={"tokens": [0], "k": 2})
        assert resp.status_code == 404


class TestRollout:
    def _post(self, client, **kwargs):
        req = {"tokens": [0], "n": 3, "max_len": 4, "temperature": 1.0,
               "seed": 9}
        req.update(kwargs)
        resp = client.post("/v1/rollout", json=req)
        assert resp.status_code == 200, resp.text
        return resp.json()["continuations"]

    def test_count_lengths_and_eos_placement(self, client_policy):
        conts = self._post(client_policy, n=5)
        assert len(conts) == 5
        for cont in conts:
            assert len(cont) <= 4
            assert all(0 <= t < VOCAB for t in cont)
            assert EOS not in cont[:-1]

    def test_identical_seeded_requests_identical(self, client_policy):
        a = self._post(client_policy, seed=21)
        b = self._post(client_policy, seed=21)
        assert a == b

    def test_different_seeds_differ(self, client_policy):
        seen = {json.dumps(self._post(client_policy, seed=s, max_len=6))
                for s in range(5)}
        assert len(seen) > 1

    def test_eos_context_yields_empty_continuations(self, client_policy):
        conts = self._post(client_policy, tokens=[0, EOS], n=4)
        assert conts == [[], [], [], []]

    def test_max_len_zero_yields_empty_continuations(self, client_policy):
        assert self._post(client_policy, max_len=0) == [[], [], []]

    def test_temperature_zero_is_greedy_and_seed_free(self, client_policy):
        a = self._post(client_policy, temperature=0.0, seed=1)
        b = self._post(client_policy, temperature=0.0, seed=2)
        assert a == b
        assert len(set(json.dumps(c) for c in a)) == 1

    def test_absent_on_reward_only_server(self, client_reward_only):
        resp = client_reward_only.post(
            "/v1/rollout", json={"tokens": [0], "n": 1, "max_len": 2,
                                 "temperature": 1.0, "seed": 0})
        assert resp.status_code == 404


class TestReward:
    def _score(self, client, prompt, response):
        resp = client.post("/v1/reward",
                           json={"prompt": prompt, "response": response})
        assert resp.status_code == 200, resp.text
        return resp.json()["reward"]

    @pytest.mark.parametrize("prompt,response",
                             [([0], [1]), ([0], [EOS]), ([0], []), ([], [])])
    def test_scores_in_bounds(self, client_full, prompt, response):
        value = self._score(client_full, prompt, response)
        assert BOUNDS[0] <= value <= BOUNDS[1]

    def test_scoring_is_deterministic(self, client_full):
        assert (self._score(client_full, [0, 1], [2])
                == self._score(client_full, [0, 1], [2]))

    def test_score_depends_on_response(self, client_full):
        assert (self._score(client_full, [0], [1])
                != self._score(client_full, [0], [2]))

    def test_reward_only_server_scores(self, client_reward_only):
        value = self._score(client_reward_only, [0], [1])
        assert BOUNDS[0] <= value <= BOUNDS[1]

    def test_out_of_vocab_is_structured_400(self, client_full):
        resp = client_full.post("/v1/reward",
                                json={"prompt": [0], "response": [VOCAB]})
        assert resp.status_code == 400
        assert resp.json()["error"] == "TokenRangeError"

    def test_absent_on_policy_only_server(self, client_policy):
        resp = client_policy.post("/v1/reward",
                                  json={"prompt": [0], "response": [1]})
        assert resp.status_code == 404


class TestWireFormat:
    def test_float_text_is_17_significant_digits(self):
        assert format_float(1.0 / 3.0) == "0.33333333333333331"
        assert format_float(2.0) == "2.0"
        assert format_float(-0.5) == "-0.5"

    def test_infinities_are_ieee_literals(self):
        assert format_float(-math.inf) == "-1e999"
        assert format_float(math.inf) == "1e999"
        assert float(json.loads("-1e999")) == -math.inf

    def test_nan_is_rejected(self):
        with pytest.raises(ValueError):
            format_float(math.nan)

    def test_bodies_parse_with_plain_json(self, client_policy):
        resp = client_policy.post("/v1/logprobs",
                                  json={"tokens": [0], "k": 3})
        body = json.loads(resp.text)
        assert all(isinstance(e["logprob"], float) for e in body["entries"])
