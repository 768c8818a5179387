"""Command-line entry point.

Every JSON artifact carries a ``schema_version`` and the ``run_config`` that
produced it.  Randomness comes from one master seed: the seed used for a
given step is ``derive_seed(master, command, iteration, trial)``, a
SeedSequence over those four integers with the command name hashed by CRC-32.

Exit codes: 0 success, 1 infeasible input or a failed audit, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .comm_plan import audit, build_placement, pull_plan, push_plan, volumes
from .cost_model import (
    CostProfile,
    HardwareSpec,
    MemoryConstants,
    ModelShape,
    build_profile,
    fit_latency,
    synth_profile,
)
from .errors import AuditError, InfeasibleError, ParseError, PlannerError, UnknownSchemeError, ValidationError
from .planner import AllInfeasible, PlannerOptions, StrategyPlan, check_plan, select_strategy
from .proposal import CandidateSet, DPSteps, propose
from .schemes import ParallelScheme, enumerate_schemes
from .simulator import Comparison, SimConfig, check_report, compare_policies, default_param_bytes, simulate_strategy
from .workload import FORMATS, LengthSample, build_histogram, load_lengths, sample_minibatch, save_lengths, synth_longtail

RUN_SCHEMA = "hydraplan.run/1"
STATS_SCHEMA = "hydraplan.stats/1"
SAMPLES_SCHEMA = "hydraplan.samples/1"
SUMMARY_SCHEMA = "hydraplan.plansummary/1"
SIMSUMMARY_SCHEMA = "hydraplan.simsummary/1"

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(PlannerError):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    paths: dict = field(default_factory=dict)
    workload: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": RUN_SCHEMA, "command": self.command, "seed": self.seed,
                "paths": self.paths, "workload": self.workload, "planner": self.planner,
                "version": __version__}


def derive_seed(master: int, command: str, iteration: int = 0, trial: int = 0) -> int:
    ss = np.random.SeedSequence([master, zlib.crc32(command.encode()), iteration, trial])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def thread_cap() -> int:
    raw = os.environ.get("HYDRA_PLANNER_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HYDRA_PLANNER_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"HYDRA_PLANNER_THREADS must be a positive integer, got {raw!r}")
    return n


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None


def load_profile(path) -> CostProfile:
    d = read_json(path)
    prof = CostProfile.from_dict(d)
    stale = [k for k, v in d["schemes"].items()
             if "max_len" in v and v["max_len"] != prof.max_len_of(ParallelScheme.parse(k))]
    if stale:
        raise AuditError(f"profile max_len cache disagrees with recomputation for {', '.join(stale)}")
    return prof


def load_data(path, fmt) -> LengthSample:
    if not Path(path).exists():
        raise UsageError(f"no such file: {path}")
    return load_lengths(path, fmt)


def strategy_slug(text: str) -> str:
    return text.replace("*", "_").replace("+", "-")


# ----------------------------------------------------------------- synth / stats

def cmd_synth(args) -> int:
    params = {}
    if args.dist == "lognormal":
        params = {"mu": args.mu, "sigma": args.sigma}
    else:
        params = {"alpha": args.alpha, "xmin": args.xmin}
    seed = derive_seed(args.seed, "synth")
    sample = synth_longtail(args.dist, args.n, args.context, seed, **params)
    save_lengths(sample, args.output, args.format)
    cfg = RunConfig("synth", args.seed, {"dataset": args.output},
                    {"distribution": args.dist, "n": args.n, "context_length": args.context,
                     "derived_seed": seed, **params})
    write_json(str(args.output) + ".meta.json", {"schema_version": "hydraplan.dataset/1",
                                                 "format": args.format or "inferred",
                                                 "run_config": cfg.to_dict()})
    print(f"wrote {len(sample)} lengths ({sample.total_tokens} tokens) to {args.output}")
    return EXIT_OK


def length_stats(sample: LengthSample, bin_width: int) -> dict:
    arr = sample.as_array()
    hist = build_histogram(sample, bin_width)
    q = {f"p{p}": int(np.percentile(arr, p, method="inverted_cdf")) for p in (50, 90, 99)}
    return {
        "count": int(arr.size),
        "total_tokens": int(arr.sum()),
        "min": int(arr.min()),
        "max": int(arr.max()),
        "mean": float(arr.mean()),
        "quantiles": q,
        "histogram": hist.to_dict(),
    }


def cmd_stats(args) -> int:
    sample = load_data(args.data, args.format)
    cfg = RunConfig("stats", 0, {"dataset": args.data}, {"bin_width": args.bin_width})
    out = {"schema_version": STATS_SCHEMA, **length_stats(sample, args.bin_width), "run_config": cfg.to_dict()}
    if args.output:
        write_json(args.output, out)
    text = dumps({k: v for k, v in out.items() if k not in ("histogram", "run_config")})
    sys.stdout.write(text)
    return EXIT_OK


# ----------------------------------------------------------------- fit

def _hardware(args) -> HardwareSpec:
    return HardwareSpec(args.n_gpus, args.gpu_memory, args.flops, args.bandwidth, args.margin)


def _shape(args) -> ModelShape:
    return ModelShape(args.hidden, args.layers, args.vocab)


def cmd_fit(args) -> int:
    shape, hw = _shape(args), _hardware(args)
    cfg = RunConfig("fit", args.seed, {"samples": args.samples, "profile": args.output},
                    {}, {"noise": args.noise, "pp_domain": args.pp_domain})
    if args.synthetic:
        schemes = enumerate_schemes(args.n_gpus, args.layers, pp_domain=args.pp_domain)
        truth = build_profile(schemes, shape, hw)
        feasible = truth.feasible_schemes()
        if not feasible:
            raise InfeasibleError("no scheme fits in memory for this model and hardware")
        caps = {s: truth.max_len_of(s) for s in feasible}
        raw = synth_profile({s: truth.coeffs_for(s) for s in feasible}, args.noise,
                            derive_seed(args.seed, "fit"), caps)
        samples = {str(s): pts for s, pts in raw.items()}
        if args.truth_out:
            write_json(args.truth_out, {**truth.to_dict(), "run_config": cfg.to_dict()})
        if args.samples:
            write_json(args.samples, {"schema_version": SAMPLES_SCHEMA, "schemes": samples,
                                      "run_config": cfg.to_dict()})
    elif args.samples:
        d = read_json(args.samples)
        if d.get("schema_version") != SAMPLES_SCHEMA:
            raise ValidationError(f"unsupported samples schema {d.get('schema_version')!r}")
        samples = d["schemes"]
    else:
        raise UsageError("fit needs --samples FILE or --synthetic")
    coeffs, fits = {}, {}
    for key in sorted(samples):
        scheme = ParallelScheme.parse(key)
        try:
            rep = fit_latency(samples[key])
        except ValidationError as exc:
            raise ValidationError(f"scheme {key}: {exc}") from None
        coeffs[scheme] = rep.coeffs
        fits[key] = {"rmse": rep.rmse, "max_rel_error": rep.max_rel_error, "points": len(samples[key])}
    prof = CostProfile(shape, hw, MemoryConstants(), coeffs)
    bad = prof.audit_cache()
    if bad:
        raise AuditError(f"max_len cache disagrees with recomputation for {', '.join(bad)}")
    write_json(args.output, {**prof.to_dict(), "fit": fits, "run_config": cfg.to_dict()})
    print(f"fitted {len(coeffs)} schemes, {len(prof.feasible_schemes())} feasible; wrote {args.output}")
    return EXIT_OK


# ----------------------------------------------------------------- propose

def cmd_propose(args) -> int:
    prof = load_profile(args.profile)
    n = args.n_gpus or prof.hardware.n_gpus
    sample = load_data(args.data, args.format)
    lengths = np.minimum(sample.as_array(), args.context)
    clipped = LengthSample.from_array(lengths)
    l_max = -(-int(lengths.max()) // args.l_step) * args.l_step
    steps = DPSteps(1, 1, args.l_step) if args.integer else DPSteps(l_step=args.l_step)
    schemes = sorted(s for s in prof.feasible_schemes() if s.gpus <= n)
    cands = propose(build_histogram(clipped, args.bin_width), n, l_max, schemes, prof, steps, args.cap)
    cfg = RunConfig("propose", 0, {"dataset": args.data, "profile": args.profile, "candidates": args.output},
                    {"context_length": args.context, "n_gpus": n},
                    {"bin_width": args.bin_width, "l_step": args.l_step, "integer": args.integer, "cap": args.cap,
                     "l_max": l_max})
    write_json(args.output, {**cands.to_dict(), "n_gpus": n, "run_config": cfg.to_dict()})
    for s, p in zip(cands.strategies, cands.provenance):
        tag = " (safety)" if p.get("safety") else ""
        print(f"{s}{tag}")
    return EXIT_OK


def load_candidates(path, n_gpus=None) -> CandidateSet:
    d = read_json(path)
    return CandidateSet.from_dict(d, n_gpus or d.get("n_gpus"))


# ----------------------------------------------------------------- plan

def _planner_options(args, seed) -> PlannerOptions:
    return PlannerOptions(trials=args.trials, seed=seed, exact_dispatch_cutoff=args.exact_dispatch_cutoff,
                          pack_exact_cutoff=args.pack_exact_cutoff)


def _plan_config(args) -> RunConfig:
    return RunConfig("plan", args.seed,
                     {"dataset": args.data, "profile": args.profile, "candidates": args.candidates,
                      "outdir": args.outdir},
                     {"token_budget": args.budget, "context_length": args.context, "iterations": args.iterations},
                     {"trials": args.trials, "exact_dispatch_cutoff": args.exact_dispatch_cutoff,
                      "pack_exact_cutoff": args.pack_exact_cutoff})


def cmd_plan(args) -> int:
    prof = load_profile(args.profile)
    cands = load_candidates(args.candidates)
    corpus = load_data(args.data, args.format)
    safety = {str(s) for s, p in zip(cands.strategies, cands.provenance) if p.get("safety")}
    cfg = _plan_config(args).to_dict()

    def one(i):
        mb = sample_minibatch(corpus, args.budget, args.context, derive_seed(args.seed, "plan", i))
        opts = _planner_options(args, derive_seed(args.seed, "plan", i, 1))
        try:
            best, report = select_strategy(mb, cands.strategies, prof, opts)
        except AllInfeasible as exc:
            raise InfeasibleError(f"iteration {i}: {exc}") from None
        feasible = [r.strategy for r in report if r.reason is None]
        fallback = str(best.strategy) in safety and all(s in safety for s in feasible)
        return mb, best, report, fallback

    with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
        results = list(pool.map(one, range(args.iterations)))
    out = Path(args.outdir)
    rows, freq = [], {}
    for i, (mb, best, report, fallback) in enumerate(results):
        name = f"plans/iter_{i:04d}.json"
        doc = {**best.to_dict(), "iteration": i, "minibatch": mb.to_dict(),
               "candidates": [r.to_dict() for r in report], "fallback": fallback, "run_config": cfg}
        write_json(out / name, doc)
        key = str(best.strategy)
        freq[key] = freq.get(key, 0) + 1
        rows.append({"iteration": i, "strategy": key, "estimated_latency": best.estimated_latency,
                     "fallback": fallback, "file": name})
    summary = {
        "schema_version": SUMMARY_SCHEMA,
        "iterations": rows,
        "strategy_frequency": dict(sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))),
        "mean_estimated_latency": math.fsum(r["estimated_latency"] for r in rows) / max(len(rows), 1),
        "run_config": cfg,
    }
    write_json(out / "summary.json", summary)
    print(f"{'strategy':<32} {'iterations':>10}")
    for k, v in summary["strategy_frequency"].items():
        print(f"{k:<32} {v:>10}")
    flagged = sum(r["fallback"] for r in rows)
    if flagged:
        print(f"{flagged} iteration(s) fell back to the safety candidate")
    return EXIT_OK


# ----------------------------------------------------------------- simulate

def _plan_files(plans_dir: Path):
    summary = plans_dir / "summary.json"
    if summary.exists():
        d = read_json(summary)
        if d.get("schema_version") != SUMMARY_SCHEMA:
            raise ValidationError(f"unsupported summary schema {d.get('schema_version')!r}")
        return [plans_dir / r["file"] for r in d["iterations"]]
    files = sorted((plans_dir / "plans").glob("iter_*.json"))
    if not files:
        raise UsageError(f"no plan files under {plans_dir}")
    return files


def _write_comm(out: Path, strategy, n_gpus, prof, param_bytes, dot, problems):
    placement = build_placement(strategy, n_gpus, prof.shape.layers, allow_idle=True)
    slug = strategy_slug(str(strategy))
    plans = []
    for direction, make in (("pull", pull_plan), ("push", push_plan)):
        cp = make(placement)
        for p in audit(cp, placement):
            problems.append(f"commplan {strategy} {direction}: {p}")
        write_json(out / "comm" / f"{slug}.{direction}.json", cp.to_dict(param_bytes))
        rows = ["gpu,sent,received,net_sent,net_received"]
        for g, v in volumes(cp, param_bytes).items():
            rows.append(f"{g},{v['sent']!r},{v['received']!r},{v['net_sent']!r},{v['net_received']!r}")
        (out / "comm" / f"{slug}.{direction}.volumes.csv").write_text("\n".join(rows) + "\n")
        if dot:
            (out / "comm" / f"{slug}.{direction}.dot").write_text(cp.to_dot())
        plans.append(cp)
    return tuple(plans)


def cmd_simulate(args) -> int:
    prof = load_profile(args.profile)
    n = args.n_gpus or prof.hardware.n_gpus
    files = _plan_files(Path(args.plans))
    out = Path(args.outdir)
    sim_cfg = SimConfig(overlap_mode=args.overlap, local_move_cost=args.local_move_cost,
                        keep_timeline=args.timeline)
    param_bytes = args.param_bytes or default_param_bytes(prof)
    cfg = RunConfig("simulate", args.seed, {"plans": args.plans, "profile": args.profile,
                                             "candidates": args.candidates, "outdir": args.outdir},
                    {"n_gpus": n}, {"overlap": args.overlap, "commplan": args.commplan,
                                    "param_bytes": param_bytes if args.commplan else None,
                                    "local_move_cost": args.local_move_cost, "ablation": args.ablation,
                                    "trials": args.trials}).to_dict()
    problems, rows, comm_cache, batches = [], [], {}, []
    for f in files:
        plan = StrategyPlan.from_dict(read_json(f))
        batches.append(list(plan.lengths))
        for p in check_plan(plan):
            problems.append(f"{f.name}: plan: {p}")
        pull = push = None
        if args.commplan:
            key = str(plan.strategy.canonical())
            if key not in comm_cache:
                comm_cache[key] = _write_comm(out, plan.strategy, n, prof, param_bytes, args.dot, problems)
            pull, push = comm_cache[key]
        rep = simulate_strategy(plan, pull, push, param_bytes if args.commplan else None, prof, sim_cfg)
        for p in check_report(rep):
            problems.append(f"{f.name}: sim: {p}")
        write_json(out / "sim" / f.name, {**rep.to_dict(), "run_config": cfg})
        rows.append({"plan": f.name, "strategy": rep.strategy, "simulated": rep.iteration_latency,
                     "propagation": rep.propagation, "estimated": rep.estimated_latency,
                     "estimate_delta": list(rep.estimate_delta)})
    sims = [r["simulated"] for r in rows]
    write_json(out / "simulation.json", {
        "schema_version": SIMSUMMARY_SCHEMA, "iterations": rows,
        "mean_simulated": float(np.mean(sims)), "std_simulated": float(np.std(sims)),
        "audit_problems": problems, "run_config": cfg,
    })
    print(f"simulated {len(rows)} plans: mean {np.mean(sims):.6g} s, std {np.std(sims):.6g} s")
    if args.ablation:
        if not args.candidates:
            raise UsageError("--ablation needs --candidates")
        cands = load_candidates(args.candidates, n)
        opts = PlannerOptions(trials=args.trials, seed=derive_seed(args.seed, "simulate"))
        cmp = compare_policies(batches, cands.strategies, prof, n, opts,
                               SimConfig(overlap_mode=args.overlap, local_move_cost=args.local_move_cost,
                                         keep_timeline=False),
                               param_bytes if args.commplan else None)
        write_json(out / "comparison.json", {**cmp.to_dict(), "run_config": cfg})
        (out / "comparison.csv").write_text(cmp.to_csv())
        write_json(out / "comparison.vega.json", cmp.to_vega())
        print(format_ladder(cmp))
    if problems:
        for p in problems:
            print(f"audit failure: {p}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def format_ladder(cmp: Comparison) -> str:
    base = cmp.policies[0]
    lines = [f"{'policy':<20} {'mean (s)':>12} {'std (s)':>12} {'speedup':>8}"]
    for p, m, s in cmp.rows():
        lines.append(f"{p:<20} {m:>12.6g} {s:>12.6g} {cmp.mean(base) / m:>8.3f}")
    return "\n".join(lines)


# ----------------------------------------------------------------- report

def cmd_report(args) -> int:
    d = Path(args.simdir)
    path = d / "comparison.json"
    if path.exists():
        cmp = Comparison.from_dict(read_json(path))
        (d / "report.csv").write_text(cmp.to_csv())
        write_json(d / "report.vega.json", cmp.to_vega())
        print(format_ladder(cmp))
        freq = cmp.strategy_frequency()
        print()
        print(f"{'dynamic strategy':<32} {'iterations':>10}")
        for k, v in freq.items():
            print(f"{k:<32} {v:>10}")
        return EXIT_OK
    path = d / "simulation.json"
    if not path.exists():
        raise UsageError(f"{d} holds neither comparison.json nor simulation.json")
    sim = read_json(path)
    rows = ["iteration,strategy,simulated_seconds,estimated_seconds"]
    for i, r in enumerate(sim["iterations"]):
        rows.append(f"{i},{r['strategy']},{r['simulated']!r},{r['estimated']!r}")
    (d / "report.csv").write_text("\n".join(rows) + "\n")
    write_json(d / "report.vega.json", {
        "$schema": "https://vega.github.io/schema/vega-lite/v5.json",
        "data": {"values": [{"iteration": i, "simulated": r["simulated"], "estimated": r["estimated"]}
                            for i, r in enumerate(sim["iterations"])]},
        "mark": "line",
        "encoding": {"x": {"field": "iteration", "type": "quantitative"},
                     "y": {"field": "simulated", "type": "quantitative", "title": "simulated seconds"}},
    })
    print(f"mean simulated {sim['mean_simulated']:.6g} s over {len(sim['iterations'])} iterations")
    return EXIT_OK


# ----------------------------------------------------------------- wiring

def _pp_list(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hydraplan", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"hydraplan {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="draw a synthetic long-tailed length corpus")
    p.add_argument("--dist", choices=["lognormal", "pareto"], default="lognormal")
    p.add_argument("--mu", type=float, default=6.9)
    p.add_argument("--sigma", type=float, default=1.2)
    p.add_argument("--alpha", type=float, default=1.5)
    p.add_argument("--xmin", type=float, default=256.0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--context", type=int, default=32768)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="summary statistics of a length corpus")
    p.add_argument("data")
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--bin-width", type=int, default=1024)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("fit", help="fit per-scheme latency curves into a profile")
    p.add_argument("--samples", help="samples JSON to read, or to write with --synthetic")
    p.add_argument("--synthetic", action="store_true", help="generate samples from the roofline model")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--truth-out", help="with --synthetic, write the ground-truth profile here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pp-domain", type=_pp_list, default=[1, 2, 4])
    p.add_argument("--n-gpus", type=int, default=16)
    p.add_argument("--layers", type=int, default=32)
    p.add_argument("--hidden", type=int, default=4096)
    p.add_argument("--vocab", type=int, default=32000)
    p.add_argument("--gpu-memory", type=float, default=80e9)
    p.add_argument("--flops", type=float, default=312e12)
    p.add_argument("--bandwidth", type=float, default=200e9)
    p.add_argument("--margin", type=float, default=4e9)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("propose", help="propose candidate strategies for a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--profile", required=True)
    p.add_argument("--n-gpus", type=int)
    p.add_argument("--context", type=int, default=32768)
    p.add_argument("--bin-width", type=int, default=16)
    p.add_argument("--l-step", type=int, default=128)
    p.add_argument("--cap", type=int, default=16)
    p.add_argument("--integer", action="store_true", help="integer GPU counts in the DP")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("plan", help="plan sampled mini-batches against the candidates")
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--profile", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--budget", type=int, default=100_000)
    p.add_argument("--context", type=int, default=32768)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--exact-dispatch-cutoff", type=int, default=10)
    p.add_argument("--pack-exact-cutoff", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate plan files, optionally with the ablation ladder")
    p.add_argument("--plans", required=True, help="output directory of the plan command")
    p.add_argument("--profile", required=True)
    p.add_argument("--candidates")
    p.add_argument("--n-gpus", type=int)
    p.add_argument("--overlap", choices=["none", "full"], default="none")
    p.add_argument("--commplan", action="store_true", help="include pull/push plans and their cost")
    p.add_argument("--param-bytes", type=float)
    p.add_argument("--local-move-cost", type=float, default=0.0)
    p.add_argument("--dot", action="store_true", help="also write Graphviz files for the comm plans")
    p.add_argument("--ablation", action="store_true")
    p.add_argument("--timeline", action="store_true", help="keep per-op timelines in the reports")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="tables and chart data from a simulate output directory")
    p.add_argument("simdir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (InfeasibleError, AuditError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (UsageError, ValidationError, ParseError, UnknownSchemeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
