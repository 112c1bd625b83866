"""End-to-end CLI run: gen-data -> trace -> sft-prep -> sample -> eval (record) -> eval (replay) -> report."""
from __future__ import annotations

import json
import random
from pathlib import Path

from sandwich_qc.cli import main
from sandwich_qc.formats import OutputFormat, parse

CHARS = "手机壳红色蓝牙耳机运动鞋连衣裙男女童装夏季新款充电宝笔记本电脑包"


def write_corpus(path: Path, n=150, seed=0):
    rng = random.Random(seed)
    lines = [f"{i}\t{''.join(rng.choice(CHARS) for _ in range(rng.randint(3, 7)))}" for i in range(n)]
    lines += ["bad line without tab", f"{n}\t"]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run(*argv):
    rc = main([str(a) for a in argv])
    assert rc == 0, f"command failed: {argv}"


def read_jsonl(path):
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


def run_pipeline(tmp: Path) -> dict:
    tmp = Path(tmp)
    write_corpus(tmp / "clean.tsv")
    (tmp / "confusions.json").write_text(json.dumps({"壳": ["克"], "机": ["几", "肌"]}, ensure_ascii=False),
                                         encoding="utf-8")
    gen = ["gen-data", "--in", tmp / "clean.tsv", "--seed", 7, "--mix", "1/3,1/3,1/3",
           "--confusions", tmp / "confusions.json", "--test-size", 30, "--dev-size", 10]
    run(*gen, "--out", tmp / "ds")
    run(*gen, "--out", tmp / "ds_again")

    def mock(name, dataset, **extra):
        cfg = {"type": "mock", "dataset": dataset, "seed": 1, "p_correct": 0.8,
               "latency": {"base_s": 0.05, "per_token_s": 0.03}, **extra}
        (tmp / name).write_text(json.dumps(cfg), encoding="utf-8")
        return tmp / name

    train_mock = mock("mock_train.json", "ds/train.jsonl")
    test_mock = mock("mock_test.json", "ds/test.jsonl")
    (tmp / "replay.json").write_text(json.dumps({"type": "replay", "path": "session.jsonl"}),
                                     encoding="utf-8")

    run("trace", "--dataset", tmp / "ds/train.jsonl", "--backend", train_mock, "--format", "rea-ans",
        "--limit", 40, "--out", tmp / "traces.jsonl")
    run("sft-prep", "--traces", tmp / "traces.jsonl", "--dataset", tmp / "ds/train.jsonl",
        "--out", tmp / "sft.jsonl")
    run("sample", "--dataset", tmp / "ds/train.jsonl", "--backend", train_mock, "--n", 4,
        "--limit", 60, "--out", tmp / "pool")
    run("eval", "--dataset", tmp / "ds/test.jsonl", "--backend", test_mock,
        "--record-to", tmp / "session.jsonl", "--format", "rea-ans,sandwich", "--budget", "both",
        "--out", tmp / "eval_live")
    run("eval", "--dataset", tmp / "ds/test.jsonl", "--backend", tmp / "replay.json",
        "--format", "rea-ans,sandwich", "--budget", "both", "--out", tmp / "eval_replay")
    run("report", "--records", tmp / "eval_replay/records.jsonl", "--out", tmp / "report")
    return {"dir": tmp}


def check_pipeline(tmp: Path) -> list[str]:
    """Invariant checks over a finished pipeline directory; returns failures."""
    tmp = Path(tmp)
    problems = []
    for split in ("train", "dev", "test"):
        a, b = tmp / "ds" / f"{split}.jsonl", tmp / "ds_again" / f"{split}.jsonl"
        if a.read_bytes() != b.read_bytes():
            problems.append(f"{split}.jsonl differs between identical runs")
    if [len(read_jsonl(tmp / "ds" / f"{s}.jsonl")) for s in ("dev", "test")] != [10, 30]:
        problems.append("split sizes not honoured")

    sft = read_jsonl(tmp / "sft.jsonl")
    if not sft:
        problems.append("no SFT lines")
    for line in sft:
        p = parse(line["completion"], OutputFormat.SANDWICH)
        if not (p.ok and p.answer == p.final_answer):
            problems.append(f"SFT line {line['id']} is not a consistent sandwich")

    verdicts = read_jsonl(tmp / "pool/verdicts.jsonl")
    pool = read_jsonl(tmp / "pool/pool.jsonl")
    if len(verdicts) != 60 or len(pool) != sum(v["kept"] for v in verdicts):
        problems.append("pool and verdicts disagree")
    if any(v["kept"] != (v["acceptable_count"] > 0) for v in verdicts):
        problems.append("keep rule violated")

    live = (tmp / "eval_live/report.json").read_text(encoding="utf-8")
    replay = (tmp / "eval_replay/report.json").read_text(encoding="utf-8")
    if live != replay:
        problems.append("replayed report differs from the recorded run")
    if (tmp / "report/report.md").read_text() != (tmp / "eval_replay/report.md").read_text():
        problems.append("report command does not re-render the same tables")
    rep = json.loads(replay)
    rows = {(r["format"], r["budget"]): r for r in rep["rows"]}
    if rows[("rea-ans", "limited")]["acc"] != 0.0:
        problems.append("limited rea-ans accuracy should collapse to 0")
    if rows[("sandwich", "limited")]["acc"] != rows[("sandwich", "full")]["acc"]:
        problems.append("sandwich accuracy changed under the limited budget")
    if not rep["deltas"] or len(rep["deltas"]) != 2:
        problems.append("missing delta rows")
    return problems
