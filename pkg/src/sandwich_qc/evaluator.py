"""Full vs limited token-budget evaluation and report rendering."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .corpus import ErrorType
from .formats import Outcome, OutputFormat, parse, render_prompt
from .modelio import Backend, BackendError, GenerationRequest, generate_many
from .textedit import GRAPHEME, accuracy, f_half_score, normalize

log = logging.getLogger(__name__)

FULL, LIMITED = "full", "limited"
_FMT_ORDER = [f.value for f in OutputFormat]
_BUDGET_ORDER = [FULL, LIMITED]
_ERR_ORDER = [e.value for e in ErrorType]


@dataclass(frozen=True)
class BudgetSpec:
    full_tokens: int = 256
    limited_tokens: int = 20

    def __post_init__(self):
        if not 1 <= self.limited_tokens < self.full_tokens:
            raise ValueError("need 1 <= limited_tokens < full_tokens")

    def tokens(self, label: str) -> int:
        return self.full_tokens if label == FULL else self.limited_tokens


@dataclass
class SampleRecord:
    id: str
    format: str
    budget: str
    max_tokens: int
    error_type: str
    q_noise: str
    q_clean: str
    text: str
    hypothesis: str
    outcome: str
    f_half: float
    acc: int
    wall_time_s: float
    time_to_first_answer_s: float | None = None
    completion_tokens: int | None = None
    error: str | None = None
    f_half_char: float | None = None  # character-level variant, for sensitivity checks

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(**d)


def extract_hypothesis(text: str, fmt: OutputFormat, q_noise: str) -> tuple[str, Outcome]:
    """The answer a search engine would act on; the raw query when none is usable."""
    result = parse(text, fmt)
    if fmt is OutputFormat.REA_ANS:
        answer = result.answer if result.ok else None
    else:
        answer = result.answer
    return (q_noise if answer is None else answer), result.outcome


def _norm3(hyp, pair):
    return normalize(hyp), normalize(pair.q_noise), normalize(pair.q_clean)


def evaluate(pairs, backend: Backend, fmt, budget_tokens: int, *, budget_label: str | None = None,
             templates=None, parallelism=None, temperature: float = 0.0) -> list[SampleRecord]:
    fmt = OutputFormat.parse(fmt)
    pairs = list(pairs)
    if not pairs:
        raise ValueError("nothing to evaluate")
    label = budget_label or str(budget_tokens)
    reqs = [GenerationRequest(render_prompt(p.q_noise, fmt, templates), max_tokens=budget_tokens,
                              temperature=temperature, n=1) for p in pairs]
    results = generate_many(backend, reqs, parallelism, return_exceptions=True)
    records = []
    for pair, res in zip(pairs, results):
        if isinstance(res, BackendError):
            log.warning("pair %s failed: %s", pair.id, res)
            text, hyp, outcome, wall, ttfa, ntok, err = "", pair.q_noise, Outcome.NO_ANSWER, 0.0, None, 0, str(res)
        else:
            text = res.texts[0]
            hyp, outcome = extract_hypothesis(text, fmt, pair.q_noise)
            wall, ttfa, ntok, err = res.wall_time_s, res.time_to_first_answer_s, res.completion_tokens[0], None
        records.append(SampleRecord(
            id=pair.id, format=fmt.value, budget=label, max_tokens=budget_tokens,
            error_type=pair.error_type.value, q_noise=pair.q_noise, q_clean=pair.q_clean,
            text=text, hypothesis=hyp, outcome=outcome.value,
            f_half=f_half_score(*_norm3(hyp, pair)),
            f_half_char=f_half_score(*_norm3(hyp, pair), mode=GRAPHEME),
            acc=accuracy(hyp, pair.q_clean), wall_time_s=wall, time_to_first_answer_s=ttfa,
            completion_tokens=ntok, error=err,
        ))
    return records


def _mean(xs):
    xs = list(xs)
    return sum(xs) / len(xs) if xs else float("nan")


def _mean_or_none(xs):
    xs = [x for x in xs if x is not None]
    return _mean(xs) if xs else None


def delta_pct(full: float, limited: float) -> float | None:
    if full == 0 or math.isnan(full) or math.isnan(limited):
        return None
    return (limited - full) / full * 100.0


def _order(value, order):
    return (order.index(value), "") if value in order else (len(order), str(value))


@dataclass
class EvalReport:
    rows: list[dict]
    deltas: list[dict]
    error_types: list[dict]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "deltas": self.deltas, "error_types": self.error_types,
                "warnings": self.warnings}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)

    def to_markdown(self) -> str:
        def fmt_num(x, digits=3):
            return "n/a" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{digits}f}"

        out = ["## Budget comparison", "",
               "| format | budget | n | F0.5 | F0.5 (char) | Acc | time (s) |",
               "|---|---|---:|---:|---:|---:|---:|"]
        for r in self.rows:
            out.append(f"| {r['format']} | {r['budget']} | {r['n']} | {fmt_num(r['f_half'])} | "
                       f"{fmt_num(r['f_half_char'])} | {fmt_num(r['acc'])} | "
                       f"{fmt_num(r['wall_time_s'])} |")
            for d in self.deltas:
                if d["format"] == r["format"] and r["budget"] == LIMITED:
                    out.append(f"| {d['format']} | delta (%) | | | | {fmt_num(d['acc_pct'], 2)} | "
                               f"{fmt_num(d['time_pct'], 2)} |")
        out += ["", "## Accuracy by error type", ""]
        cols = [e for e in _ERR_ORDER if any(e in r["acc"] for r in self.error_types)]
        extra = sorted({k for r in self.error_types for k in r["acc"]} - set(cols))
        cols += extra
        out.append("| format | budget | " + " | ".join(cols) + " |")
        out.append("|---|---|" + "---:|" * len(cols))
        for r in self.error_types:
            cells = [fmt_num(r["acc"].get(c), 4) for c in cols]
            out.append(f"| {r['format']} | {r['budget']} | " + " | ".join(cells) + " |")
        if self.warnings:
            out += ["", *[f"> warning: {w}" for w in self.warnings]]
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "format", "budget", "error_type", "n", "f_half", "f_half_char",
                    "acc", "wall_time_s", "acc_delta_pct", "time_delta_pct"])
        for r in self.rows:
            w.writerow(["budget", r["format"], r["budget"], "", r["n"], r["f_half"],
                        r["f_half_char"], r["acc"], r["wall_time_s"], "", ""])
        for d in self.deltas:
            w.writerow(["delta", d["format"], f"{FULL}->{LIMITED}", "", "", "", "", "", "",
                        d["acc_pct"], d["time_pct"]])
        for r in self.error_types:
            for et, acc in r["acc"].items():
                w.writerow(["error_type", r["format"], r["budget"], et, r["n"][et], "", "", acc,
                            "", "", ""])
        return buf.getvalue()


def report(records) -> EvalReport:
    """Group per-sample records into budget rows, budget deltas and per-error-type accuracy."""
    records = [r if isinstance(r, SampleRecord) else SampleRecord.from_dict(r) for r in records]
    if not records:
        raise ValueError("no records to report")
    groups: dict[tuple, list[SampleRecord]] = {}
    for r in records:
        groups.setdefault((r.format, r.budget), []).append(r)
    keys = sorted(groups, key=lambda k: (_order(k[0], _FMT_ORDER), _order(k[1], _BUDGET_ORDER)))

    rows, error_rows = [], []
    for fmt, budget in keys:
        recs = groups[(fmt, budget)]
        rows.append({
            "format": fmt, "budget": budget, "n": len(recs),
            "f_half": _mean(r.f_half for r in recs),
            "f_half_char": _mean_or_none(r.f_half_char for r in recs),
            "acc": _mean(r.acc for r in recs),
            "wall_time_s": _mean(r.wall_time_s for r in recs),
        })
        by_type: dict[str, list[SampleRecord]] = {}
        for r in recs:
            by_type.setdefault(r.error_type, []).append(r)
        types = sorted(by_type, key=lambda e: _order(e, _ERR_ORDER))
        error_rows.append({
            "format": fmt, "budget": budget,
            "acc": {e: _mean(r.acc for r in by_type[e]) for e in types},
            "n": {e: len(by_type[e]) for e in types},
        })

    deltas, warnings = [], []
    by_key = {(r["format"], r["budget"]): r for r in rows}
    for fmt in dict.fromkeys(k[0] for k in keys):
        full, lim = by_key.get((fmt, FULL)), by_key.get((fmt, LIMITED))
        if full and lim:
            deltas.append({"format": fmt,
                           "acc_pct": delta_pct(full["acc"], lim["acc"]),
                           "f_half_pct": delta_pct(full["f_half"], lim["f_half"]),
                           "time_pct": delta_pct(full["wall_time_s"], lim["wall_time_s"])})
        elif full or lim:
            msg = f"{fmt}: only the {FULL if full else LIMITED} budget is present; no delta row"
            log.warning(msg)
            warnings.append(msg)
    return EvalReport(rows, deltas, error_rows, warnings)


def write_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_records(path) -> list[SampleRecord]:
    with open(path, encoding="utf-8") as fh:
        return [SampleRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_report(rep: EvalReport, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"md": out / "report.md", "csv": out / "report.csv", "json": out / "report.json"}
    paths["md"].write_text(rep.to_markdown(), encoding="utf-8")
    paths["csv"].write_text(rep.to_csv(), encoding="utf-8")
    paths["json"].write_text(rep.to_json() + "\n", encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}
