"""Tabular simulation of the three output layouts.

A PolicyModel holds finite conditional tables

    p_reason[x, r]      P(R | x)
    p_final[x, r, c]    P(C | x, R)   answer written after the reasoning
    p_init[x, c]        P0(C | x)     answer written before any reasoning

Exact enumeration gives the initial-answer correctness of each layout; the
SoftmaxPolicy/grpo_step pair trains those tables with group-relative policy
gradients under the real reward suite.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from types import SimpleNamespace

import numpy as np

from .formats import OutputFormat, render
from .rewards import RewardWeights, total_reward

TABLES = ("init", "reason", "final")


def _check_rows(name, table, atol=1e-12):
    if np.any(table < 0) or np.any(table > 1):
        raise ValueError(f"{name}: probabilities must lie in [0, 1]")
    sums = table.sum(axis=-1)
    if not np.allclose(sums, 1.0, rtol=0, atol=atol):
        raise ValueError(f"{name}: rows must sum to 1 (worst {np.abs(sums - 1).max():.2e})")


@dataclass
class PolicyModel:
    inputs: list[str]
    gold: list[str]
    reasons: list[str]
    answers: list[str]
    p_reason: np.ndarray
    p_final: np.ndarray
    p_init: np.ndarray
    atol: float = 1e-12

    def __post_init__(self):
        self.p_reason = np.asarray(self.p_reason, dtype=float)
        self.p_final = np.asarray(self.p_final, dtype=float)
        self.p_init = np.asarray(self.p_init, dtype=float)
        nx, nr, nc = len(self.inputs), len(self.reasons), len(self.answers)
        if len(self.gold) != nx:
            raise ValueError("one gold answer per input")
        missing = [g for g in self.gold if g not in self.answers]
        if missing:
            raise ValueError(f"gold answers not in the answer set: {missing}")
        for name, table, shape in (("p_reason", self.p_reason, (nx, nr)),
                                   ("p_final", self.p_final, (nx, nr, nc)),
                                   ("p_init", self.p_init, (nx, nc))):
            if table.shape != shape:
                raise ValueError(f"{name} has shape {table.shape}, expected {shape}")
            _check_rows(name, table, self.atol)

    def index(self, x) -> int:
        return x if isinstance(x, (int, np.integer)) else self.inputs.index(x)

    def gold_index(self, x) -> int:
        return self.answers.index(self.gold[self.index(x)])

    def to_dict(self) -> dict:
        return {
            "inputs": [{"x": x, "gold": g} for x, g in zip(self.inputs, self.gold)],
            "reasons": list(self.reasons),
            "answers": list(self.answers),
            "p_reason": self.p_reason.tolist(),
            "p_final": self.p_final.tolist(),
            "p_init": self.p_init.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyModel":
        return cls([i["x"] for i in d["inputs"]], [i["gold"] for i in d["inputs"]],
                   d["reasons"], d["answers"], d["p_reason"], d["p_final"], d["p_init"],
                   atol=d.get("atol", 1e-9))

    @classmethod
    def load(cls, path) -> "PolicyModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# --- exact enumeration -------------------------------------------------------

def p_rea_ans(model: PolicyModel, x) -> float:
    """Correctness of a reasoning-first answer: sum_R P(R|x) P(y*|x,R)."""
    i, g = model.index(x), model.gold_index(x)
    return float(sum(model.p_reason[i, r] * model.p_final[i, r, g] for r in range(len(model.reasons))))


def p_sandwich_init(model: PolicyModel, x) -> float:
    """Correctness of the initial answer under the hard constraint C_init = C_final.

    Enumerates every (R, C_init, C_final) with joint weight
    P(R|x) P(C_final|x,R) 1[C_init = C_final] and keeps C_init = y*.
    """
    i, g = model.index(x), model.gold_index(x)
    nc = len(model.answers)
    same = np.eye(nc)
    joint = model.p_reason[i][:, None, None] * model.p_final[i][:, None, :] * same[None, :, :]
    return float(joint[:, g, :].sum())


def p_ans_rea_init(model: PolicyModel, x) -> float:
    """Answer-first correctness: P0(y*|x); no reasoning table enters."""
    return float(model.p_init[model.index(x), model.gold_index(x)])


def p_consistent(model: PolicyModel, x) -> float:
    """P(C_init = C_final) when C_init is drawn from P0, independent of R."""
    i = model.index(x)
    final_marginal = model.p_reason[i] @ model.p_final[i]
    return float(model.p_init[i] @ final_marginal)


def random_model(rng: np.random.Generator, n_inputs=2, n_reasons=3, n_answers=4) -> PolicyModel:
    def rows(*shape):
        t = rng.gamma(0.7, size=shape) + 1e-12
        return t / t.sum(axis=-1, keepdims=True)

    answers = [f"a{k}" for k in range(n_answers)]
    gold = [answers[int(rng.integers(n_answers))] for _ in range(n_inputs)]
    return PolicyModel([f"x{k}" for k in range(n_inputs)], gold, [f"r{k}" for k in range(n_reasons)],
                       answers, rows(n_inputs, n_reasons), rows(n_inputs, n_reasons, n_answers),
                       rows(n_inputs, n_answers))


def toy_model() -> PolicyModel:
    """Two noisy queries whose reasoning-conditioned answers beat the blind first guess."""
    answers = ["abcd", "abdc", "abce", "bacd", "xyzw", "xzyw", "xyzv"]
    inputs, gold = ["abdc", "xzyw"], ["abcd", "xyzw"]
    reasons = ["spot the swapped pair", "unsure", "keep the query"]
    p_reason = [[0.5, 0.3, 0.2], [0.4, 0.4, 0.2]]
    p_final = [
        [[0.85, 0.05, 0.04, 0.02, 0.02, 0.01, 0.01],
         [0.45, 0.30, 0.10, 0.10, 0.02, 0.02, 0.01],
         [0.10, 0.70, 0.10, 0.05, 0.02, 0.02, 0.01]],
        [[0.02, 0.01, 0.01, 0.01, 0.85, 0.05, 0.05],
         [0.02, 0.02, 0.02, 0.02, 0.45, 0.35, 0.12],
         [0.02, 0.02, 0.02, 0.02, 0.10, 0.72, 0.10]],
    ]
    p_init = [
        [0.20, 0.45, 0.15, 0.10, 0.04, 0.03, 0.03],
        [0.03, 0.03, 0.03, 0.03, 0.20, 0.48, 0.20],
    ]
    return PolicyModel(inputs, gold, reasons, answers, p_reason, p_final, p_init)


# --- softmax policy -------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class SoftmaxPolicy:
    inputs: list[str]
    gold: list[str]
    reasons: list[str]
    answers: list[str]
    init: np.ndarray    # [X, C]
    reason: np.ndarray  # [X, R]
    final: np.ndarray   # [X, R, C]
    lr: float = 0.1
    group_size: int = 8
    eps: float = 1e-8
    trainable: tuple[str, ...] = TABLES
    kl_coef: float = 0.0
    reference: dict | None = None

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group size must be >= 2")
        bad = set(self.trainable) - set(TABLES)
        if bad:
            raise ValueError(f"unknown tables {sorted(bad)}")

    @classmethod
    def from_model(cls, model: PolicyModel, **kw) -> "SoftmaxPolicy":
        with np.errstate(divide="ignore"):
            logs = [np.log(np.clip(t, 1e-300, None)) for t in (model.p_init, model.p_reason, model.p_final)]
        pol = cls(list(model.inputs), list(model.gold), list(model.reasons), list(model.answers),
                  *logs, **kw)
        if pol.kl_coef and pol.reference is None:
            pol.reference = {"init": pol.init.copy(), "reason": pol.reason.copy(),
                             "final": pol.final.copy()}
        return pol

    def copy(self) -> "SoftmaxPolicy":
        return replace(self, init=self.init.copy(), reason=self.reason.copy(), final=self.final.copy())

    def model(self) -> PolicyModel:
        return PolicyModel(self.inputs, self.gold, self.reasons, self.answers,
                           softmax(self.reason), softmax(self.final), softmax(self.init), atol=1e-9)

    def params(self) -> dict:
        return {"init": self.init, "reason": self.reason, "final": self.final}


Trajectory = tuple  # (c_init, r, c_final) as indices


def log_prob(policy: SoftmaxPolicy, x: int, traj: Trajectory) -> float:
    ci, r, cf = traj

    def lsm(row, k):
        m = row.max()
        return row[k] - m - math.log(np.exp(row - m).sum())

    return lsm(policy.init[x], ci) + lsm(policy.reason[x], r) + lsm(policy.final[x, r], cf)


def grad_log_prob(policy: SoftmaxPolicy, x: int, traj: Trajectory) -> dict:
    """d log pi(traj | x) / d logits, as arrays shaped like each table."""
    ci, r, cf = traj
    g = {name: np.zeros_like(t) for name, t in policy.params().items()}
    for name, idx, k in (("init", (x,), ci), ("reason", (x,), r), ("final", (x, r), cf)):
        row = g[name][idx]
        row -= softmax(policy.params()[name][idx])
        row[k] += 1.0
    return g


def sample_trajectory(policy: SoftmaxPolicy, x: int, rng: np.random.Generator) -> Trajectory:
    def draw(logits):
        p = softmax(logits)
        return int(rng.choice(len(p), p=p))

    ci = draw(policy.init[x])
    r = draw(policy.reason[x])
    cf = draw(policy.final[x, r])
    return ci, r, cf


def trajectory_text(policy: SoftmaxPolicy, traj: Trajectory) -> str:
    ci, r, cf = traj
    return render(OutputFormat.SANDWICH, policy.answers[ci], policy.reasons[r], policy.answers[cf])


class RewardCache:
    """Memoised total_reward over the finite trajectory space."""

    def __init__(self, policy: SoftmaxPolicy, weights: RewardWeights):
        self.policy = policy
        self.weights = weights
        self._cache: dict = {}

    def __call__(self, x: int, traj: Trajectory) -> float:
        key = (x, traj)
        if key not in self._cache:
            pair = SimpleNamespace(q_noise=self.policy.inputs[x], q_clean=self.policy.gold[x])
            self._cache[key] = total_reward(trajectory_text(self.policy, traj), pair, self.weights).r_total
        return self._cache[key]


def group_advantages(rewards, eps: float = 1e-8) -> tuple[np.ndarray, bool]:
    """(r - mean) / (std + eps) with the population std; all zeros for a flat group."""
    r = np.asarray(rewards, dtype=float)
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r), True
    return (r - r.mean()) / (std + eps), False


def _kl_grad(logits: np.ndarray, ref_logits: np.ndarray) -> np.ndarray:
    """d KL(softmax(logits) || softmax(ref)) / d logits, row-wise."""
    p = softmax(logits)
    logp = np.log(np.clip(p, 1e-300, None))
    logq = np.log(np.clip(softmax(ref_logits), 1e-300, None))
    kl = (p * (logp - logq)).sum(axis=-1, keepdims=True)
    return p * (logp - logq - kl)


@dataclass
class GroupStats:
    mean_reward: float
    std_reward: float
    zero_variance: bool
    rewards: list = field(default_factory=list)
    advantages: list = field(default_factory=list)


def grpo_step(policy: SoftmaxPolicy, x, weights: RewardWeights | None = None, rng_seed=0,
              reward_fn=None) -> tuple[SoftmaxPolicy, GroupStats]:
    """Sample a group for input x, normalise rewards within it, and take one
    ascent step on sum_i A_i * grad log pi(traj_i). Returns a new policy."""
    weights = weights or RewardWeights()
    x = x if isinstance(x, (int, np.integer)) else policy.inputs.index(x)
    reward_fn = reward_fn or RewardCache(policy, weights)
    rng = np.random.default_rng(rng_seed)
    trajs = [sample_trajectory(policy, x, rng) for _ in range(policy.group_size)]
    rewards = [reward_fn(x, t) for t in trajs]
    adv, flat = group_advantages(rewards, policy.eps)
    stats = GroupStats(float(np.mean(rewards)), float(np.std(rewards)), flat,
                       list(map(float, rewards)), adv.tolist())

    new = policy.copy()
    if not flat:
        params = new.params()
        for a, t in zip(adv, trajs):
            g = grad_log_prob(policy, x, t)
            for name in policy.trainable:
                params[name] += policy.lr * a * g[name]
    if policy.kl_coef and policy.reference is not None:
        params = new.params()
        for name, idx in (("init", (x,)), ("reason", (x,)), ("final", (x,))):
            if name in policy.trainable:
                params[name][idx] -= policy.lr * policy.kl_coef * _kl_grad(
                    getattr(policy, name)[idx], policy.reference[name][idx])
    return new, stats


# --- training and ablation -----------------------------------------------------------

def snapshot(policy: SoftmaxPolicy) -> dict:
    """Exact, input-averaged probabilities of the current tables."""
    m = policy.model()
    xs = range(len(m.inputs))
    init_ok = float(np.mean([p_ans_rea_init(m, x) for x in xs]))
    rea = float(np.mean([p_rea_ans(m, x) for x in xs]))
    return {
        "p_init_correct": init_ok,
        "p_consistent": float(np.mean([p_consistent(m, x) for x in xs])),
        "p_rea_ans": rea,
        "p_sandwich_init": float(np.mean([p_sandwich_init(m, x) for x in xs])),
        "gap": abs(init_ok - rea),
    }


def train(policy: SoftmaxPolicy, steps: int, weights: RewardWeights | None = None, seed: int = 0,
          record_every: int = 1):
    """Round-robin over inputs; step t uses a seed derived from (seed, t)."""
    weights = weights or RewardWeights()
    reward_fn = RewardCache(policy, weights)
    seeds = np.random.SeedSequence(seed).generate_state(steps, dtype=np.uint64) if steps else []
    curve = [{"step": 0, **snapshot(policy), "mean_reward": float("nan")}]
    for t in range(steps):
        x = t % len(policy.inputs)
        policy, stats = grpo_step(policy, x, weights, int(seeds[t]), reward_fn)
        if (t + 1) % record_every == 0 or t + 1 == steps:
            curve.append({"step": t + 1, **snapshot(policy), "mean_reward": stats.mean_reward})
    return policy, curve


def ablate_consistency(policy: SoftmaxPolicy, steps: int = 500, seeds=range(10), w_acc: float = 1.0,
                       record_every: int = 10) -> dict:
    """Train twins with the fused format/consistency weight off (0) and on (1)."""
    seeds = list(seeds)
    out = {}
    for w_fc in (0.0, 1.0):
        weights = RewardWeights(w_acc, w_fc)
        finals, curves, tables = [], [], []
        for s in seeds:
            learned, curve = train(policy.copy(), steps, weights, s, record_every)
            finals.append(curve[-1])
            curves.append(curve)
            tables.append(learned)
        keys = [k for k in finals[0] if k != "step"]
        mean_curve = [
            {"step": pts[0]["step"], **{k: float(np.mean([p[k] for p in pts])) for k in keys}}
            for pts in zip(*curves)
        ]
        out[w_fc] = {
            "weights": (w_acc, w_fc),
            "final": {k: float(np.mean([f[k] for f in finals])) for k in keys},
            "per_seed": finals,
            "curve": mean_curve,
            "policies": tables,
        }
    return out


def ablation_markdown(result: dict) -> str:
    lines = ["| w_fc | P(C_init = y*) | P(C_init = C_final) | P_rea-ans | gap |",
             "|---:|---:|---:|---:|---:|"]
    for w_fc, block in sorted(result.items()):
        f = block["final"]
        lines.append(f"| {w_fc:g} | {f['p_init_correct']:.4f} | {f['p_consistent']:.4f} | "
                     f"{f['p_rea_ans']:.4f} | {f['gap']:.4f} |")
    return "\n".join(lines) + "\n"
