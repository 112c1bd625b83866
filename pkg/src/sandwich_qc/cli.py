"""Command-line entry point: data generation, SFT prep, sampling, evaluation, simulation."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import corpus, evaluator, formats, modelio, sampler, simlab
from .rewards import RewardWeights

log = logging.getLogger("sandwich_qc")


class CliError(Exception):
    pass


# --- config -------------------------------------------------------------------

def _strict(cls, data, section):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise CliError(f"config section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise CliError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return cls(**data)


@dataclass
class DataConfig:
    mix: str = "1/3,1/3,1/3"
    dev_size: int | None = None
    test_size: int | None = None
    repeat: int = 1
    confusions: str | None = None
    fallback: bool = True


@dataclass
class SimConfig:
    steps: int = 500
    seeds: int = 10
    lr: float = 0.1
    group_size: int = 8
    eps: float = 1e-8
    kl_coef: float = 0.0
    w_acc: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    backend: dict | str | None = None
    dataset: str | None = None
    budget: dict = field(default_factory=dict)
    sampling: dict = field(default_factory=dict)
    rewards: dict = field(default_factory=dict)
    templates: dict | None = None
    data: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    base_dir: Path | None = field(default=None, repr=False)  # set from the config file location

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(data, dict) or "base_dir" in data:
            raise CliError("config must be an object without a 'base_dir' key")
        cfg = _strict(cls, data, "root")
        cfg.base_dir = path.parent
        cfg.validate()
        return cfg

    def validate(self):
        evaluator.BudgetSpec(**self.budget)
        _strict(sampler.SamplingConfig, self.sampling, "sampling")
        _strict(RewardWeights, self.rewards, "rewards")
        _strict(DataConfig, self.data, "data")
        _strict(SimConfig, self.simulate, "simulate")
        if isinstance(self.backend, dict):
            modelio.BackendConfig.from_dict(self.backend)
        if self.templates:
            for key in self.templates:
                formats.OutputFormat.parse(key)


def _backend(args, cfg: RunConfig) -> modelio.Backend:
    spec = args.backend if getattr(args, "backend", None) else cfg.backend
    if spec is None:
        raise CliError("no backend given (--backend or config 'backend')")
    if isinstance(spec, dict):
        bc = modelio.BackendConfig.from_dict(spec, base_dir=cfg.base_dir)
    else:
        path = Path(spec)
        if not path.is_absolute() and cfg.base_dir is not None and not path.exists():
            path = cfg.base_dir / path
        bc = modelio.BackendConfig.from_dict(json.loads(path.read_text(encoding="utf-8")),
                                             base_dir=path.parent)
    if getattr(args, "parallelism", None):
        bc.parallelism = args.parallelism
    if getattr(args, "record_to", None):
        bc.record_to = args.record_to
    return modelio.build_backend(bc)


def _pick(flag, section: dict, key, default):
    if flag is not None:
        return flag
    return section.get(key, default)


def _emit(args, summary: dict, human: str):
    if args.json:
        print(json.dumps(summary, ensure_ascii=False, sort_keys=True, default=str))
    else:
        print(human)


def _dataset(args, cfg):
    path = args.dataset or cfg.dataset
    if not path:
        raise CliError("no dataset given (--dataset)")
    pairs = corpus.read_pairs(path)
    if getattr(args, "split", None):
        pairs = [p for p in pairs if p.split == args.split]
    if getattr(args, "limit", None):
        pairs = pairs[: args.limit]
    if not pairs:
        raise CliError(f"{path}: no pairs selected")
    return pairs


# --- commands -----------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    dc = _strict(DataConfig, cfg.data, "data")
    seed = _pick(args.seed, {"seed": cfg.seed}, "seed", 0)
    mix = _pick(args.mix, asdict(dc), "mix", dc.mix)
    repeat = _pick(args.repeat, asdict(dc), "repeat", 1)
    table_path = _pick(args.confusions, asdict(dc), "confusions", None)
    confusions = corpus.ConfusionTable.load(table_path) if table_path else corpus.ConfusionTable()
    fallback = dc.fallback and not args.no_fallback

    ingest = corpus.ingest_clean(args.input, args.input_format)
    n = len(ingest)
    dev = _pick(args.dev_size, asdict(dc), "dev_size", None)
    test = _pick(args.test_size, asdict(dc), "test_size", None)
    dev = n // 10 if dev is None else dev
    test = n // 10 if test is None else test

    stats = corpus.BuildStats()
    pairs = corpus.build_dataset(ingest.entries, mix, seed, confusions=confusions,
                                 fallback=fallback, repeat=repeat,
                                 split_sizes={"dev": dev, "test": test}, stats=stats)
    if len(pairs) < dev + test:
        raise CliError("not enough pairs for the requested dev/test sizes")

    violations = []
    for p in pairs:
        if repeat == 1:
            violations += [f"{p.id}: {msg}" for msg in corpus.check_pair(p)]
        else:
            d = corpus.osa_distance(corpus.query_units(p.q_noise), corpus.query_units(p.q_clean))
            if d != repeat:
                violations.append(f"{p.id}: unit edit distance {d}, expected {repeat}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in corpus.SPLITS:
        subset = [p for p in pairs if p.split == split]
        corpus.write_pairs(subset, out / f"{split}.jsonl")
        counts[split] = len(subset)
    by_type = {k.value: sum(p.error_type is k for p in pairs) for k in corpus.ErrorType}
    summary = {"ingested": n, "rejected_rows": len(ingest.diagnostics), "pairs": len(pairs),
               "splits": counts, "error_types": by_type, "skipped": stats.skipped,
               "violations": len(violations), "out": str(out)}
    human = (f"ingested {n} queries ({len(ingest.diagnostics)} rows rejected), built {len(pairs)} pairs\n"
             f"splits: {counts}\nerror types: {by_type}\nskipped: {stats.skipped}\n"
             f"invariant violations: {len(violations)}")
    for line in ingest.diagnostics[:20]:
        log.warning("ingest: %s", line)
    for line in violations[:20]:
        log.error("invariant: %s", line)
    _emit(args, summary, human)
    return 1 if violations else 0


def cmd_trace(args, cfg: RunConfig) -> int:
    pairs = _dataset(args, cfg)
    fmt = formats.OutputFormat.parse(args.format)
    backend = _backend(args, cfg)
    try:
        reqs = [modelio.GenerationRequest(formats.render_prompt(p.q_noise, fmt, cfg.templates),
                                          max_tokens=args.max_tokens, temperature=args.temperature)
                for p in pairs]
        results = modelio.generate_many(backend, reqs)
    finally:
        backend.close()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for p, req, res in zip(pairs, reqs, results):
            fh.write(json.dumps({"id": p.id, "format": fmt.value, "prompt": req.prompt,
                                 "text": res.texts[0]}, ensure_ascii=False) + "\n")
    _emit(args, {"traces": len(pairs), "out": str(out)}, f"wrote {len(pairs)} traces to {out}")
    return 0


def cmd_sft_prep(args, cfg: RunConfig) -> int:
    pairs = {p.id: p for p in corpus.read_pairs(args.dataset or cfg.dataset)}
    written, skipped, unknown, bad = 0, 0, 0, 0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.traces, encoding="utf-8") as src, open(out, "w", encoding="utf-8") as dst:
        for line in src:
            if not line.strip():
                continue
            trace = json.loads(line)
            pair = pairs.get(str(trace["id"]))
            if pair is None:
                unknown += 1
                continue
            parsed = formats.parse(trace["text"], formats.OutputFormat.REA_ANS)
            if not parsed.ok:
                skipped += 1
                continue
            completion = formats.restructure_to_sandwich(parsed)
            check = formats.parse(completion, formats.OutputFormat.SANDWICH)
            if not (check.ok and check.answer == check.final_answer):
                bad += 1
                continue
            prompt = formats.render_prompt(pair.q_noise, formats.OutputFormat.SANDWICH, cfg.templates)
            dst.write(json.dumps({"id": pair.id, "prompt": prompt, "completion": completion},
                                 ensure_ascii=False) + "\n")
            written += 1
    summary = {"written": written, "skipped_not_strict": skipped, "unknown_ids": unknown,
               "failed_recheck": bad, "out": str(out)}
    _emit(args, summary, f"wrote {written} sandwich SFT lines ({skipped} traces not strict rea-ans, "
                         f"{unknown} unknown ids)")
    return 1 if bad else 0


def cmd_sample(args, cfg: RunConfig) -> int:
    pairs = _dataset(args, cfg)
    sc = dict(cfg.sampling)
    for key, flag in (("n", args.n), ("accept_threshold", args.threshold),
                      ("temperature", args.temperature), ("max_tokens", args.max_tokens)):
        if flag is not None:
            sc[key] = flag
    if args.reject_if_all_pass:
        sc["reject_if_all_pass"] = True
    scfg = _strict(sampler.SamplingConfig, sc, "sampling")
    backend = _backend(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = sampler.PoolSummary()
    try:
        verdicts = sampler.filter_pool(pairs, backend, scfg, templates=cfg.templates, summary=summary)
    except sampler.PoolAborted as exc:
        sampler.write_pool(pairs, exc.verdicts, out / "pool.jsonl", out / "verdicts.jsonl")
        raise CliError(f"sampling aborted after {len(exc.verdicts)} pairs: {exc}") from exc
    finally:
        backend.close()
    sampler.write_pool(pairs, verdicts, out / "pool.jsonl", out / "verdicts.jsonl")
    _emit(args, {**asdict(summary), "out": str(out)}, summary.table())
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    pairs = _dataset(args, cfg)
    bspec = dict(cfg.budget)
    if args.full_tokens is not None:
        bspec["full_tokens"] = args.full_tokens
    if args.limited_tokens is not None:
        bspec["limited_tokens"] = args.limited_tokens
    budget = evaluator.BudgetSpec(**bspec)
    labels = [evaluator.FULL, evaluator.LIMITED] if args.budget == "both" else [args.budget]
    fmts = list(formats.OutputFormat) if args.format == "all" else [
        formats.OutputFormat.parse(f) for f in args.format.split(",")]
    backend = _backend(args, cfg)
    records = []
    try:
        for fmt in fmts:
            for label in labels:
                records += evaluator.evaluate(pairs, backend, fmt, budget.tokens(label),
                                              budget_label=label, templates=cfg.templates)
    finally:
        backend.close()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluator.write_records(records, out / "records.jsonl")
    rep = evaluator.report(records)
    paths = evaluator.write_report(rep, out)
    failed = sum(r.error is not None for r in records)
    _emit(args, {"records": len(records), "failed_samples": failed, "report": rep.to_dict(),
                 "outputs": paths}, rep.to_markdown())
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    records = []
    for path in args.records:
        records += evaluator.read_records(path)
    rep = evaluator.report(records)
    paths = evaluator.write_report(rep, args.out)
    _emit(args, {"report": rep.to_dict(), "outputs": paths}, rep.to_markdown())
    return 0


def cmd_simulate(args, cfg: RunConfig) -> int:
    sim = _strict(SimConfig, cfg.simulate, "simulate")
    steps = args.steps if args.steps is not None else sim.steps
    n_seeds = args.seeds if args.seeds is not None else sim.seeds
    model = simlab.PolicyModel.load(args.model) if args.model else simlab.toy_model()
    policy = simlab.SoftmaxPolicy.from_model(model, lr=sim.lr, group_size=sim.group_size,
                                             eps=sim.eps, kl_coef=sim.kl_coef)
    w_fcs = [0.0, 1.0] if args.wfc == "both" else [float(args.wfc)]
    seeds = range(cfg.seed, cfg.seed + n_seeds)

    results = {}
    for w_fc in w_fcs:
        weights = RewardWeights(sim.w_acc, w_fc)
        runs = [simlab.train(policy.copy(), steps, weights, s, args.record_every)[1] for s in seeds]
        keys = [k for k in runs[0][0] if k != "step"]
        curve = [{"step": pts[0]["step"], **{k: sum(p[k] for p in pts) / len(pts) for k in keys}}
                 for pts in zip(*runs)]
        results[w_fc] = {"final": {k: v for k, v in curve[-1].items() if k != "step"}, "curve": curve,
                         "per_seed": [r[-1] for r in runs]}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curves.csv", "w", encoding="utf-8", newline="") as fh:
        cols = ["w_fc", "step", "p_init_correct", "p_consistent", "p_rea_ans", "p_sandwich_init",
                "gap", "mean_reward"]
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for w_fc, block in results.items():
            for pt in block["curve"]:
                w.writerow({"w_fc": w_fc, **{k: pt[k] for k in cols[1:]}})
    md = simlab.ablation_markdown(results)
    (out / "summary.md").write_text(md, encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(
        {str(k): {"final": v["final"], "per_seed": v["per_seed"]} for k, v in results.items()},
        indent=2) + "\n", encoding="utf-8")
    if args.plot:
        _plot(results, out / "curves.png")
    _emit(args, {str(k): v["final"] for k, v in results.items()}, md)
    return 0


def _plot(results, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for w_fc, block in results.items():
        steps = [p["step"] for p in block["curve"]]
        ax.plot(steps, [p["p_init_correct"] for p in block["curve"]], label=f"P(C_init=y*) w_fc={w_fc:g}")
        ax.plot(steps, [p["p_consistent"] for p in block["curve"]], "--",
                label=f"P(C_init=C_final) w_fc={w_fc:g}")
    ax.set_xlabel("step")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --- parser -------------------------------------------------------------------

def _global_args(parser, suppress=False):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="JSON run config; flags override it", **kw)
    parser.add_argument("--json", action="store_true", help="print a machine-readable summary", **kw)
    parser.add_argument("-v", "--verbose", action="store_true", **kw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sandwich-qc", description=__doc__)
    _global_args(p)
    # the same flags are accepted after the subcommand too
    common = argparse.ArgumentParser(add_help=False)
    _global_args(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    g = add("gen-data", help="build noisy/clean pairs from a clean query corpus")
    g.add_argument("--in", dest="input", required=True)
    g.add_argument("--input-format", choices=["tsv", "jsonl"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--mix", help="wrong,missing,disorder proportions, e.g. 1/3,1/3,1/3")
    g.add_argument("--dev-size", type=int)
    g.add_argument("--test-size", type=int)
    g.add_argument("--repeat", type=int, help="errors composed per query (default 1)")
    g.add_argument("--confusions", help="JSON unit -> [confusable units]")
    g.add_argument("--no-fallback", action="store_true",
                   help="do not substitute random corpus units when a unit has no confusion entry")
    g.set_defaults(func=cmd_gen_data)

    def backend_args(sp):
        sp.add_argument("--backend", help="backend config JSON (http, mock or replay)")
        sp.add_argument("--parallelism", type=int)
        sp.add_argument("--record-to", help="append every request/response to this session file")

    def dataset_args(sp):
        sp.add_argument("--dataset", help="pairs JSONL")
        sp.add_argument("--split", choices=corpus.SPLITS)
        sp.add_argument("--limit", type=int)

    t = add("trace", help="collect raw model outputs in one layout")
    dataset_args(t)
    backend_args(t)
    t.add_argument("--format", default="rea-ans")
    t.add_argument("--max-tokens", type=int, default=256)
    t.add_argument("--temperature", type=float, default=0.0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_trace)

    s = add("sft-prep", help="restructure rea-ans traces into sandwich SFT lines")
    s.add_argument("--traces", required=True, help="JSONL of {id, text}")
    s.add_argument("--dataset", help="pairs JSONL providing the queries")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sft_prep)

    r = add("sample", help="rejection-sample the RL training pool")
    dataset_args(r)
    backend_args(r)
    r.add_argument("--n", type=int)
    r.add_argument("--threshold", type=float)
    r.add_argument("--temperature", type=float)
    r.add_argument("--max-tokens", type=int)
    r.add_argument("--reject-if-all-pass", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_sample)

    e = add("eval", help="evaluate under full and/or limited token budgets")
    dataset_args(e)
    backend_args(e)
    e.add_argument("--format", default="sandwich", help="rea-ans, ans-rea, sandwich, a comma list, or all")
    e.add_argument("--budget", choices=["full", "limited", "both"], default="both")
    e.add_argument("--full-tokens", type=int)
    e.add_argument("--limited-tokens", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    rp = add("report", help="re-render a report from records.jsonl files")
    rp.add_argument("--records", nargs="+", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)

    m = add("simulate", help="tabular consistency-reward simulation")
    m.add_argument("--model", help="policy model JSON (default: built-in toy model)")
    m.add_argument("--steps", type=int)
    m.add_argument("--seeds", type=int)
    m.add_argument("--wfc", choices=["0", "1", "both"], default="both")
    m.add_argument("--record-every", type=int, default=10)
    m.add_argument("--plot", action="store_true", help="also write curves.png")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        return args.func(args, cfg)
    except (CliError, corpus.CorpusError, modelio.BackendError, ValueError, OSError,
            formats.FormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
