from __future__ import annotations

import itertools
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sandwich_qc.corpus import QueryPair
from sandwich_qc.modelio import GenerationRequest, MockBackend, ReplayBackend, record_session
from sandwich_qc.formats import render_prompt
from sandwich_qc.sampler import (
    PoolAborted,
    PoolSummary,
    SamplingConfig,
    filter_pool,
    judge_trajectory,
    keep_decision,
    write_pool,
)

from reward_cases import S

PAIR = QueryPair("p1", "abXd", "abcd", "WrongWords", 2)
GOOD = S("abcd", "X should be c", "abcd")
BAD = "I am not sure"


def test_judge_examples():
    assert judge_trajectory(GOOD, PAIR) == (True, 1.0)
    assert judge_trajectory("<<<", PAIR) == (False, 0.0)
    ok, f = judge_trajectory(S("zbcd", "r", "zbcd"), PAIR)
    assert ok and abs(f - 5 / 9) < 1e-12
    # a partial output is judged on its first answer
    assert judge_trajectory("<answer>abcd</answer><reasoning>trunc", PAIR) == (True, 1.0)
    # echoing the input is not acceptable
    assert judge_trajectory(S("abXd", "r", "abXd"), PAIR) == (False, 0.0)


def test_threshold():
    text = S("zbcd", "r", "zbcd")
    assert judge_trajectory(text, PAIR, 0.5)[0]
    assert not judge_trajectory(text, PAIR, 0.6)[0]


def test_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(n=0)
    with pytest.raises(ValueError):
        SamplingConfig(accept_threshold=1.0)


def scripted(pattern):
    return MockBackend.scripted({PAIR.q_noise: [GOOD if ok else BAD for ok in pattern]})


@pytest.mark.parametrize("pattern", list(itertools.product([False, True], repeat=4)))
def test_all_patterns(pattern):
    for all_pass in (False, True):
        cfg = SamplingConfig(n=4, reject_if_all_pass=all_pass)
        v = filter_pool([PAIR], scripted(pattern), cfg)[0]
        assert v.acceptable_count == sum(pattern)
        want = any(pattern) and not (all_pass and all(pattern))
        assert v.kept == want


def test_one_of_four_kept():
    v = filter_pool([PAIR], scripted([False, False, True, False]), SamplingConfig(n=4))[0]
    assert v.kept and v.reason == "kept"


@given(st.integers(0, 8), st.integers(1, 8), st.booleans())
def test_keep_decision_invariants(count, n, all_pass):
    count = min(count, n)
    kept = keep_decision(count, n, all_pass)
    if kept:
        assert count >= 1
    if not all_pass and count < n:
        assert keep_decision(count + 1, n, all_pass) >= kept


def test_summary_and_files(tmp_path):
    pairs = [QueryPair(f"p{i}", f"ab{i}X", f"ab{i}c", "WrongWords", 3) for i in range(3)]
    good = lambda i: S(f"ab{i}c", "r", f"ab{i}c")
    backend = MockBackend.scripted({
        "ab0X": [good(0)] * 2,          # all pass
        "ab1X": [good(1), "nothing"],   # kept
        "ab2X": ["nothing"] * 2,        # all fail
    })
    summary = PoolSummary()
    verdicts = filter_pool(pairs, backend, SamplingConfig(n=2, reject_if_all_pass=True),
                           summary=summary)
    assert [v.reason for v in verdicts] == ["all_pass", "kept", "all_fail"]
    assert (summary.kept, summary.rejected_all_fail, summary.rejected_all_pass) == (1, 1, 1)
    assert "total" in summary.table()
    write_pool(pairs, verdicts, tmp_path / "pool.jsonl", tmp_path / "verdicts.jsonl")
    pool = [json.loads(l) for l in (tmp_path / "pool.jsonl").read_text().splitlines()]
    assert [p["id"] for p in pool] == ["p1"]
    lines = (tmp_path / "verdicts.jsonl").read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[2])["f_scores"] == [0.0, 0.0]


def test_uses_sandwich_prompt_and_sampling_params():
    seen = []

    def responder(prompt, i, seed):
        seen.append((prompt, seed))
        return GOOD

    filter_pool([PAIR], MockBackend(responder), SamplingConfig(n=3, seed=11))
    assert seen == [(render_prompt("abXd", "sandwich"), 11)] * 3


def test_fatal_error_aborts_with_partial_results():
    pairs = [QueryPair("a", "abXd", "abcd", "WrongWords", 2),
             QueryPair("b", "zzzz", "zzzy", "WrongWords", 3)]
    backend = MockBackend.scripted({"abXd": GOOD})
    with pytest.raises(PoolAborted) as info:
        filter_pool(pairs, backend, SamplingConfig(n=1), chunk_size=1)
    assert [v.pair_id for v in info.value.verdicts] == ["a"]


def test_replay_gives_identical_kept_set(tmp_path):
    pairs = [QueryPair(f"p{i}", f"ab{i}X", f"ab{i}c", "WrongWords", 3) for i in range(15)]
    live = MockBackend.from_pairs(pairs, p_correct=0.3, seed=8)
    cfg = SamplingConfig(n=4, seed=1)
    reqs = [GenerationRequest(render_prompt(p.q_noise, "sandwich"), max_tokens=cfg.max_tokens,
                              temperature=cfg.temperature, n=cfg.n, seed=cfg.seed) for p in pairs]
    session = record_session(live, reqs, tmp_path / "s.jsonl")
    a = filter_pool(pairs, live, cfg)
    b = filter_pool(pairs, ReplayBackend(session), cfg)
    c = filter_pool(pairs, ReplayBackend(session), cfg)
    kept = lambda vs: [v.pair_id for v in vs if v.kept]
    assert kept(a) == kept(b) == kept(c)
    assert 0 < len(kept(a)) < len(pairs)
