"""Margin-based rejection sampling: keep inputs where some sampled trajectory is acceptable."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

from .formats import OutputFormat, first_answer, render_prompt
from .modelio import Backend, FatalError, GenerationRequest, generate_many
from .textedit import f_half_score, normalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingConfig:
    n: int = 4
    accept_threshold: float = 0.0
    reject_if_all_pass: bool = False
    temperature: float = 0.7
    max_tokens: int = 256
    seed: int | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0 <= self.accept_threshold < 1:
            raise ValueError("accept_threshold must be in [0, 1)")


@dataclass
class TrajectoryVerdict:
    pair_id: str
    texts: list[str]
    f_scores: list[float]
    acceptable_count: int
    kept: bool

    @property
    def reason(self) -> str:
        if self.kept:
            return "kept"
        return "all_fail" if self.acceptable_count == 0 else "all_pass"

    def to_dict(self) -> dict:
        return {**asdict(self), "reason": self.reason}


@dataclass
class PoolSummary:
    kept: int = 0
    rejected_all_fail: int = 0
    rejected_all_pass: int = 0

    def add(self, v: TrajectoryVerdict):
        if v.kept:
            self.kept += 1
        elif v.acceptable_count == 0:
            self.rejected_all_fail += 1
        else:
            self.rejected_all_pass += 1

    def table(self) -> str:
        total = self.kept + self.rejected_all_fail + self.rejected_all_pass
        rows = [("kept", self.kept), ("rejected (all fail)", self.rejected_all_fail),
                ("rejected (all pass)", self.rejected_all_pass), ("total", total)]
        return "\n".join(f"{name:<22}{count:>8}" for name, count in rows)


class PoolAborted(RuntimeError):
    def __init__(self, message, verdicts):
        super().__init__(message)
        self.verdicts = verdicts


def judge_trajectory(text: str, pair, threshold: float = 0.0) -> tuple[bool, float]:
    answer = first_answer(text)
    if answer is None:
        return False, 0.0
    f = f_half_score(normalize(answer), normalize(pair.q_noise), normalize(pair.q_clean))
    return f > threshold, f


def keep_decision(acceptable_count: int, n: int, reject_if_all_pass: bool = False) -> bool:
    if acceptable_count == 0:
        return False
    return not (reject_if_all_pass and acceptable_count == n)


def verdict_for(pair, texts, cfg: SamplingConfig) -> TrajectoryVerdict:
    judged = [judge_trajectory(t, pair, cfg.accept_threshold) for t in texts]
    count = sum(ok for ok, _ in judged)
    return TrajectoryVerdict(pair.id, list(texts), [f for _, f in judged], count,
                             keep_decision(count, len(texts), cfg.reject_if_all_pass))


def filter_pool(pairs, backend: Backend, cfg: SamplingConfig | None = None, *,
                templates=None, parallelism=None, summary: PoolSummary | None = None,
                chunk_size: int = 64) -> list[TrajectoryVerdict]:
    """One verdict per pair. On a fatal backend error the verdicts gathered so
    far travel with the raised PoolAborted."""
    cfg = cfg or SamplingConfig()
    pairs = list(pairs)
    summary = summary if summary is not None else PoolSummary()
    verdicts: list[TrajectoryVerdict] = []
    for start in range(0, len(pairs), chunk_size):
        chunk = pairs[start:start + chunk_size]
        reqs = [GenerationRequest(render_prompt(p.q_noise, OutputFormat.SANDWICH, templates),
                                  max_tokens=cfg.max_tokens, temperature=cfg.temperature,
                                  n=cfg.n, seed=cfg.seed) for p in chunk]
        results = generate_many(backend, reqs, parallelism, return_exceptions=True)
        for pair, res in zip(chunk, results):
            if isinstance(res, Exception):
                if isinstance(res, FatalError):
                    raise PoolAborted(f"pair {pair.id}: {res}", verdicts) from res
                raise res
            v = verdict_for(pair, res.texts, cfg)
            summary.add(v)
            verdicts.append(v)
    log.info("pool: kept %d, all-fail %d, all-pass %d",
             summary.kept, summary.rejected_all_fail, summary.rejected_all_pass)
    return verdicts


def write_pool(pairs, verdicts, pool_path, verdicts_path) -> None:
    kept = {v.pair_id for v in verdicts if v.kept}
    with open(pool_path, "w", encoding="utf-8") as fh:
        for p in pairs:
            if p.id in kept:
                fh.write(json.dumps(p.to_dict(), ensure_ascii=False, separators=(",", ":")) + "\n")
    with open(verdicts_path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps(v.to_dict(), ensure_ascii=False, separators=(",", ":")) + "\n")
