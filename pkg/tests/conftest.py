"""Shared fixtures: tiny vocabularies, hand-built policies, and helpers for
constructing states without going through a full decode."""

from __future__ import annotations

import pytest

from collabdec import DecoderConfig, TabularPolicy, Vocab, initial_state
from collabdec.core import State, append_token

# A three-token alphabet used throughout: A=0, B=1, EOS=2.
A, B, EOS = 0, 1, 2

# Lines registered by the acceptance gate (tests/test_acceptance.py), echoed
# after the run so the checklist is visible even with output capture on.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture
def vocab3() -> Vocab:
    return Vocab(size=3, eos_id=EOS)


@pytest.fixture
def vocab3_labeled() -> Vocab:
    return Vocab(size=3, eos_id=EOS, labels=("alpha", "beta", "<eos>"))


def state_of(vocab: Vocab, prompt=(), generated=(), horizon: int = 8) -> State:
    """Build a State by walking append_token, so terminality is computed by
    the same rules the decoder uses."""
    cfg = DecoderConfig(max_new_tokens=horizon)
    st = initial_state(vocab, prompt, cfg)
    for z in generated:
        st = append_token(st, z, cfg)
    return st


def flat_rows(vocab: Vocab, row: dict[int, float], horizon: int) -> dict:
    """A context-independent tabular policy: the same row at every reachable
    non-terminal context (any prompt+generated string without EOS, shorter
    than prompt length + horizon is impractical to enumerate, so callers
    pass explicit contexts instead).  Here: all non-EOS strings < horizon."""
    contexts = [()]
    frontier = [()]
    for _ in range(horizon - 1):
        nxt = []
        for ctx in frontier:
            for z in range(vocab.size):
                if z == vocab.eos_id:
                    continue
                nxt.append(ctx + (z,))
        contexts.extend(nxt)
        frontier = nxt
    return {ctx: dict(row) for ctx in contexts}


def flat_tabular(vocab: Vocab, row: dict[int, float], horizon: int = 4,
                 name: str = "flat") -> TabularPolicy:
    return TabularPolicy(vocab, flat_rows(vocab, row, horizon), name=name)
