"""Acceptance criteria, one test per criterion.

conftest.py prints a PASS/FAIL line for each of these at the end of the run.
"""
from __future__ import annotations

import itertools
import random
import time

import numpy as np
import pytest

from sandwich_qc.corpus import ConfusionTable, ErrorType, build_dataset, query_units, write_pairs
from sandwich_qc.evaluator import FULL, LIMITED, evaluate, report
from sandwich_qc.formats import Outcome, OutputFormat, parse
from sandwich_qc.modelio import MockBackend, ReplayBackend
from sandwich_qc.rewards import RewardWeights, total_reward
from sandwich_qc.sampler import SamplingConfig, filter_pool
from sandwich_qc.simlab import (
    SoftmaxPolicy,
    ablate_consistency,
    grad_log_prob,
    grpo_step,
    log_prob,
    p_ans_rea_init,
    p_rea_ans,
    p_sandwich_init,
    random_model,
    toy_model,
)
from sandwich_qc.textedit import extract_edits, f_half_score, normalize

import pipeline
import sessions
from oracles import PathBank, classify_unit_diff, grammar_oracle, restricted_growth_strings
from reward_cases import CASES, S, SUB, pair_for

LETTERS = "abcd"


def edit_tuples(es):
    return [(e.start, e.end, tuple(e.replacement)) for e in es.edits]


def check_block(bank, S_, T_, chunk):
    """Compare extract_edits with the path-bank oracle for every row pair; returns mismatches."""
    idx, _ = bank.best(S_, T_, chunk=chunk)
    bad = []
    for k, s_row, t_row in zip(idx, S_, T_):
        s = "".join(LETTERS[x] for x in s_row)
        t = "".join(LETTERS[x] for x in t_row)
        got = extract_edits(s, t)
        want = [(a, b, tuple(LETTERS[x] for x in rep)) for a, b, rep in bank.edits(int(k), s_row, t_row)]
        if edit_tuples(got) != want or got.apply() != t:
            bad.append((s, t))
    return bad


def test_01_edit_metric_oracle_equivalence():
    start = time.perf_counter()
    n_pairs, bad = 0, []
    # exhaustive up to renaming of the four letters: each pair (s, t) is one
    # restricted growth string of the concatenation s + t
    for a in range(7):
        for b in range(7):
            rows = restricted_growth_strings(a + b)
            bank = PathBank(a, b)
            bad += check_block(bank, rows[:, :a], rows[:, a:], chunk=4096)
            n_pairs += len(rows)
    # random longer pairs, 7 or 8 units each
    rng = np.random.default_rng(2024)
    for a, b in itertools.product((7, 8), repeat=2):
        bank = PathBank(a, b)
        chunk = max(64, 2 ** 25 // len(bank.paths))
        S_ = rng.integers(0, 4, size=(2500, a), dtype=np.int8)
        T_ = rng.integers(0, 4, size=(2500, b), dtype=np.int8)
        bad += check_block(bank, S_, T_, chunk)
        n_pairs += 2500
    elapsed = time.perf_counter() - start
    print(f"criterion 1: {n_pairs} pairs, {len(bad)} mismatches, {elapsed:.1f}s")
    assert bad == [], bad[:5]
    assert elapsed < 120


def test_02_f_half_examples():
    assert f_half_score("abcd", "abXd", "abcd") == 1.0
    assert f_half_score("abXd", "abXd", "abcd") == 0.0
    assert abs(f_half_score("zbcd", "abXd", "abcd") - 5 / 9) < 1e-12


def synthetic_corpus(n, seed):
    rng = random.Random(seed)
    han = "手机壳红色蓝牙耳机运动鞋连衣裙男女童装夏季新款充电宝笔记本电脑包"
    words = "red blue phone case shoes running kids summer new charger laptop bag".split()
    out = []
    while len(out) < n:
        if len(out) % 3 == 2:
            # two-word queries cannot lose a word and stay spaced, so they start at three
            q = " ".join(rng.choice(words) for _ in range(rng.randint(3, 5)))
        else:
            q = "".join(rng.choice(han) for _ in range(rng.randint(2, 9)))
        # all-identical units admit no transposition; such queries are skipped by design
        if len(set(query_units(q))) > 1:
            out.append((f"c{len(out)}", q))
    return out


KIND = {ErrorType.WRONG_WORDS: "substitution", ErrorType.MISSING_WORDS: "deletion",
        ErrorType.DISORDER_WORDS: "transposition"}


def test_03_corpus_invariants(tmp_path):
    clean = synthetic_corpus(10_000, 0)
    table = ConfusionTable({"壳": ["克"], "机": ["几", "肌"], "red": ["rad"]})
    runs = []
    for k in range(2):
        pairs = build_dataset(clean, seed=11, confusions=table, split_sizes={"dev": 500, "test": 500})
        write_pairs(pairs, tmp_path / f"run{k}.jsonl")
        runs.append(pairs)
    pairs = runs[0]
    assert len(pairs) == 10_000
    violations = {k: 0 for k in KIND}
    for p in pairs:
        found = classify_unit_diff(query_units(p.q_noise), query_units(p.q_clean))
        if found is None or found[0] != KIND[p.error_type] or p.error_pos not in found[1]:
            violations[p.error_type] += 1
    print(f"criterion 3: violations per type {({k.value: v for k, v in violations.items()})}")
    assert all(v == 0 for v in violations.values())
    assert all(sum(p.error_type is k for p in pairs) > 3000 for k in KIND)
    assert (tmp_path / "run0.jsonl").read_bytes() == (tmp_path / "run1.jsonl").read_bytes()


def test_04_reward_contract():
    names = {c[0] for c in CASES}
    assert len(CASES) == 50 and {"blind guessing", "disconnect"} <= names
    for name, text, strings, acc, fmt, cons in CASES:
        b = total_reward(text, pair_for(strings))
        assert b.r_acc == pytest.approx(acc, abs=1e-12), name
        assert (b.r_fmt, b.r_cons) == (fmt, cons), name
        p = parse(text, OutputFormat.SANDWICH)
        consistent = p.ok and normalize(p.sandwich.c_init) == normalize(p.sandwich.c_final)
        assert (b.r_unified == 1) == consistent, name
    # echoing the noisy query earns nothing, whatever follows it
    rng = random.Random(4)
    pair = pair_for(SUB)
    for _ in range(500):
        tail = "".join(rng.choice("abcdX ") for _ in range(rng.randint(0, 6)))
        for text in (S(pair.q_noise, tail, tail), S(pair.q_noise, tail, pair.q_clean),
                     f"<answer>{pair.q_noise}</answer><reasoning>{tail}"):
            assert total_reward(text, pair, RewardWeights(1, 1)).r_acc == 0.0


def test_05_rejection_sampling_rule():
    from sandwich_qc.corpus import QueryPair
    pair = QueryPair("p", "abXd", "abcd", "WrongWords", 2)
    good, bad = S("abcd", "X should be c", "abcd"), "no idea"
    for pattern in itertools.product([False, True], repeat=4):
        backend = MockBackend.scripted({pair.q_noise: [good if ok else bad for ok in pattern]})
        for all_pass in (False, True):
            v = filter_pool([pair], backend, SamplingConfig(n=4, reject_if_all_pass=all_pass))[0]
            assert v.acceptable_count == sum(pattern)
            assert v.kept == (any(pattern) and not (all_pass and all(pattern)))


def test_06_budget_failure_mode(tmp_path):
    backend = ReplayBackend(sessions.write_session(tmp_path / "session.jsonl"))
    records = []
    for fmt in ("rea-ans", "sandwich"):
        for label, budget in ((FULL, sessions.FULL), (LIMITED, sessions.LIMITED)):
            records += evaluate(sessions.PAIRS, backend, fmt, budget, budget_label=label)
    rep = report(records)
    rows = {(r["format"], r["budget"]): r for r in rep.rows}
    assert rows[("rea-ans", LIMITED)]["acc"] == 0.0
    assert all(r.outcome == Outcome.NO_ANSWER.value for r in records
               if r.format == "rea-ans" and r.budget == LIMITED)
    assert rows[("sandwich", LIMITED)]["acc"] == rows[("sandwich", FULL)]["acc"]
    deltas = {d["format"]: d for d in rep.deltas}
    assert deltas["sandwich"]["time_pct"] == pytest.approx((0.467 - 1.613) / 1.613 * 100, abs=0.01)
    assert deltas["sandwich"]["time_pct"] == pytest.approx(-71.05, abs=0.01)
    assert deltas["rea-ans"]["time_pct"] == pytest.approx((0.400 - 1.250) / 1.250 * 100, abs=0.01)
    assert "-71.05" in rep.to_markdown()


def test_07_answer_position_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        m = random_model(rng, n_inputs=2, n_reasons=int(rng.integers(1, 6)),
                         n_answers=int(rng.integers(2, 7)))
        for x in m.inputs:
            worst = max(worst, abs(p_sandwich_init(m, x) - p_rea_ans(m, x)))
        before = [p_ans_rea_init(m, x) for x in m.inputs]
        m.p_reason = m.p_reason[:, rng.permutation(m.p_reason.shape[1])]
        assert [p_ans_rea_init(m, x) for x in m.inputs] == before
    elapsed = time.perf_counter() - start
    print(f"criterion 7: max |difference| {worst:.2e}, {elapsed:.2f}s")
    assert worst < 1e-12 and elapsed < 60


def test_08_grpo_simulator():
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        pol = SoftmaxPolicy.from_model(random_model(rng, n_inputs=2, n_reasons=3, n_answers=4))
        for t in pol.params().values():
            t += rng.normal(scale=2.0, size=t.shape)
        x, traj = int(rng.integers(2)), (int(rng.integers(4)), int(rng.integers(3)), int(rng.integers(4)))
        analytic = grad_log_prob(pol, x, traj)
        for name, table in pol.params().items():
            numeric = np.zeros_like(table)
            for idx in np.ndindex(table.shape):
                old = table[idx]
                table[idx] = old + 1e-5
                up = log_prob(pol, x, traj)
                table[idx] = old - 1e-5
                down = log_prob(pol, x, traj)
                table[idx] = old
                numeric[idx] = (up - down) / 2e-5
            rel = np.linalg.norm(analytic[name] - numeric) / max(np.linalg.norm(numeric), 1e-12)
            worst = max(worst, rel)
    assert worst < 1e-6

    pol = SoftmaxPolicy.from_model(toy_model())
    new, stats = grpo_step(pol, 0, rng_seed=0, reward_fn=lambda x, t: 1.0)
    assert stats.zero_variance
    assert all(np.array_equal(new.params()[k], pol.params()[k]) for k in ("init", "reason", "final"))

    res = ablate_consistency(SoftmaxPolicy.from_model(toy_model()), steps=500, seeds=range(10))
    on, off = res[1.0]["final"]["p_consistent"], res[0.0]["final"]["p_consistent"]
    print(f"criterion 8: max FD error {worst:.1e}; P(C_init=C_final) w_fc=1 {on:.4f} vs w_fc=0 {off:.4f}")
    assert on > off


FRAGMENTS = ["<answer>", "</answer>", "<reasoning>", "</reasoning>", "<answer", "answer>", "</",
             "<", ">", " ", "\n", "\t", "a", "b", "手机", "é", "́", "\U0001F600", "\x00", "�"]


def fuzz_inputs(n, seed):
    rng = np.random.default_rng(seed)
    frag_ids = rng.integers(0, len(FRAGMENTS), size=(n, 12))
    lengths = rng.integers(0, 13, size=n)
    raw = rng.integers(0, 256, size=(n, 16), dtype=np.uint8)
    for i in range(n):
        if i % 4 == 3:
            # arbitrary bytes, decoded leniently
            yield raw[i, :lengths[i]].tobytes().decode("utf-8", errors="replace")
        else:
            yield "".join(FRAGMENTS[k] for k in frag_ids[i, :lengths[i]])


def test_09_parser_fuzzing():
    fmts = list(OutputFormat)
    start = time.perf_counter()
    checked = mismatched = 0
    for i, text in enumerate(fuzz_inputs(1_000_000, 9)):
        fmt = fmts[i % 3]
        p = parse(text, fmt)
        if i % 1000 == 0:
            outcome, groups = grammar_oracle(text, fmt.value)
            checked += 1
            ok = p.outcome.value == outcome
            if ok and outcome == "partial_answer":
                ok = p.answer == groups[0]
            if ok and outcome == "strict_ok":
                ok = {OutputFormat.REA_ANS: (p.reasoning, p.answer),
                      OutputFormat.ANS_REA: (p.answer, p.reasoning),
                      OutputFormat.SANDWICH: (p.answer, p.reasoning, p.final_answer)}[fmt] == groups
            mismatched += not ok
    print(f"criterion 9: 1e6 inputs parsed in {time.perf_counter() - start:.1f}s, "
          f"{checked} oracle checks, {mismatched} mismatches")
    assert checked == 1000 and mismatched == 0


def test_10_end_to_end_smoke(tmp_path):
    start = time.perf_counter()
    pipeline.run_pipeline(tmp_path)
    problems = pipeline.check_pipeline(tmp_path)
    elapsed = time.perf_counter() - start
    print(f"criterion 10: pipeline in {elapsed:.1f}s, {len(problems)} failed checks")
    assert problems == []
    assert elapsed < 60
