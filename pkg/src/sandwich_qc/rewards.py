"""Trajectory rewards: accuracy, format, consistency and their weighted total."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .formats import Outcome, OutputFormat, ParseResult, SandwichOutput, parse
from .textedit import f_half_score, normalize


@dataclass(frozen=True)
class RewardWeights:
    w_acc: float = 1.0
    w_fc: float = 1.0  # weight of the fused format x consistency term

    def __post_init__(self):
        if self.w_acc < 0 or self.w_fc < 0:
            raise ValueError("reward weights must be non-negative")
        if self.w_acc == 0 and self.w_fc == 0:
            raise ValueError("at least one reward weight must be positive")


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: float
    r_fmt: int
    r_cons: int
    r_unified: int
    r_total: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def accuracy_reward(result: ParseResult, pair) -> float:
    """F0.5 of the initial answer; zero when it is missing or just echoes the input.

    A partial parse still yields its first answer, the one a search engine
    would consume before the rest of the output arrives.
    """
    if result.outcome is Outcome.NO_ANSWER or result.answer is None:
        return 0.0
    c_init = normalize(result.answer)
    q_noise = normalize(pair.q_noise)
    if c_init == q_noise:
        return 0.0
    return f_half_score(c_init, q_noise, normalize(pair.q_clean))


def format_reward(result: ParseResult) -> int:
    return int(result.ok and result.fmt is OutputFormat.SANDWICH)


def consistency_reward(out: SandwichOutput) -> int:
    return int(normalize(out.c_init) == normalize(out.c_final))


def total_reward(text: str, pair, w: RewardWeights | None = None) -> RewardBreakdown:
    w = w or RewardWeights()
    result = parse(text, OutputFormat.SANDWICH)
    r_acc = accuracy_reward(result, pair)
    r_fmt = format_reward(result)
    r_cons = consistency_reward(result.sandwich) if r_fmt else 0
    r_unified = r_fmt * r_cons
    return RewardBreakdown(r_acc, r_fmt, r_cons, r_unified, w.w_acc * r_acc + w.w_fc * r_unified)
