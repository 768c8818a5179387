"""Discrete-event simulation of planned iterations.

Pipelines run a one-forward-one-backward schedule over their packed
micro-batches.  Event times are exact rationals, so equal micro-batches land
on ``(pp - 1 + V) * T`` without rounding drift.
"""
from __future__ import annotations

import csv
import heapq
import io
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .comm_plan import build_placement, pull_plan, push_plan, volumes
from .dispatch import round_robin
from .errors import InfeasibleError, ValidationError
from .packing import empty_plan, ffd_pack, pack, stage_times
from .planner import PlannerOptions, StrategyPlan, best_of, plan_strategy
from .schemes import Strategy

SIM_SCHEMA = "hydraplan.sim/1"
COMPARISON_SCHEMA = "hydraplan.comparison/1"
POLICIES = ("i_static_ffd", "ii_static_packed", "iii_fixed_hetero", "iv_dynamic")


@dataclass(frozen=True)
class SimConfig:
    forward_fraction: Fraction = Fraction(1, 3)
    overlap_mode: str = "none"
    comm_epochs: tuple = ("pull_before", "push_after")
    # seconds per byte of local copies, which never overlap with compute
    local_move_cost: float = 0.0
    keep_timeline: bool = True

    def __post_init__(self):
        ff = Fraction(self.forward_fraction)
        if not 0 < ff < 1:
            raise ValidationError("forward_fraction must lie strictly between 0 and 1")
        object.__setattr__(self, "forward_fraction", ff)
        if self.overlap_mode not in ("none", "full"):
            raise ValidationError(f"unknown overlap mode {self.overlap_mode!r}")
        if tuple(self.comm_epochs) != ("pull_before", "push_after"):
            raise ValidationError("only the pull_before/push_after epoch placement is modeled")
        if self.local_move_cost < 0:
            raise ValidationError("local_move_cost must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["forward_fraction"] = str(self.forward_fraction)
        d["comm_epochs"] = list(self.comm_epochs)
        return d


def schedule_orders(pp: int, v: int):
    """Per-stage op order: ``min(pp - s, v)`` warm-up forwards, then backward/forward pairs."""
    orders = []
    for s in range(pp):
        warm = min(pp - s, v)
        ops = [("F", j) for j in range(warm)]
        nf = warm
        for j in range(v):
            ops.append(("B", j))
            if nf < v:
                ops.append(("F", nf))
                nf += 1
        orders.append(ops)
    return orders


def _deps(kind, s, j, pp):
    if kind == "F":
        return [("F", s - 1, j)] if s else []
    if s == pp - 1:
        return [("F", s, j)]
    return [("B", s + 1, j)]


def simulate_pipeline(microbatch_times, pp: int, config: SimConfig | None = None):
    """Latency, bubble fraction and timeline of one pipeline.

    The timeline lists ``(stage, kind, microbatch, start, end)`` in start order.
    """
    cfg = config or SimConfig()
    if pp < 1:
        raise ValidationError("pp must be >= 1")
    if len(microbatch_times) == 0:
        raise ValidationError("a pipeline needs at least one micro-batch to simulate")
    T = [Fraction(float(t)) for t in microbatch_times]
    if any(t < 0 for t in T):
        raise ValidationError("micro-batch times must be non-negative")
    fwd = [t * cfg.forward_fraction for t in T]
    dur = {"F": fwd, "B": [t - f for t, f in zip(T, fwd)]}
    v = len(T)
    orders = schedule_orders(pp, v)
    ptr = [0] * pp
    busy = [False] * pp
    done = {}
    events = []
    timeline = []
    seq = 0

    def try_start(s, now):
        nonlocal seq
        if s < 0 or s >= pp or busy[s] or ptr[s] == len(orders[s]):
            return
        kind, j = orders[s][ptr[s]]
        if any(d not in done for d in _deps(kind, s, j, pp)):
            return
        busy[s] = True
        ptr[s] += 1
        end = now + dur[kind][j]
        timeline.append((s, kind, j, now, end))
        heapq.heappush(events, (end, seq, s, kind, j))
        seq += 1

    for s in range(pp):
        try_start(s, Fraction(0))
    while events:
        now, _, s, kind, j = heapq.heappop(events)
        done[(kind, s, j)] = now
        busy[s] = False
        try_start(s, now)
        if kind == "F":
            try_start(s + 1, now)
            if s == pp - 1:
                try_start(s, now)
        else:
            try_start(s - 1, now)
    if len(done) != 2 * v * pp:
        raise AssertionError("schedule deadlocked")
    latency = done[("B", 0, v - 1)]
    work = sum(T)
    bubble = 1 - work / latency if latency else Fraction(0)
    tl = [(s, k, j, float(a), float(b)) for s, k, j, a, b in timeline] if cfg.keep_timeline else []
    return float(latency), float(bubble), tl


@dataclass
class PipelineSim:
    scheme: str
    latency: float
    bubble: float
    estimated: float
    timeline: list = field(default_factory=list)

    @property
    def estimate_delta(self) -> float:
        if self.estimated == 0:
            return 0.0
        return (self.latency - self.estimated) / self.estimated

    def to_dict(self):
        return {
            "scheme": self.scheme,
            "latency": self.latency,
            "bubble": self.bubble,
            "estimated": self.estimated,
            "estimate_delta": self.estimate_delta,
            "timeline": [list(e) for e in self.timeline],
        }


@dataclass
class SimReport:
    strategy: str
    per_pipeline: list
    propagation: float
    comm_seconds: dict
    iteration_latency: float
    estimated_latency: float
    config: SimConfig

    @property
    def estimate_delta(self):
        return [p.estimate_delta for p in self.per_pipeline]

    def pipeline_latencies(self):
        return [p.latency for p in self.per_pipeline]

    def balance_ratio(self) -> float:
        """Max over min pipeline latency; idle pipelines make it infinite."""
        lat = self.pipeline_latencies()
        lo = min(lat)
        return max(lat) / lo if lo > 0 else math.inf

    def to_dict(self) -> dict:
        return {
            "schema_version": SIM_SCHEMA,
            "strategy": self.strategy,
            "per_pipeline": [p.to_dict() for p in self.per_pipeline],
            "propagation": self.propagation,
            "comm_seconds": self.comm_seconds,
            "iteration_latency": self.iteration_latency,
            "estimated_latency": self.estimated_latency,
            "estimate_delta": self.estimate_delta,
            "config": self.config.to_dict(),
        }


def check_report(report: SimReport) -> list[str]:
    problems = []
    if report.iteration_latency < report.propagation:
        problems.append("iteration latency below propagation")
    for i, p in enumerate(report.per_pipeline):
        if not 0.0 <= p.bubble < 1.0:
            problems.append(f"pipeline {i} bubble fraction {p.bubble} outside [0, 1)")
    return problems


def _comm_seconds(plan, param_bytes, bandwidth):
    if plan is None:
        return 0.0, 0.0
    vols = volumes(plan, param_bytes)
    peak = max(max(v["net_sent"], v["net_received"]) for v in vols.values())
    unit = param_bytes / plan.slice_count
    local = {}
    for p in plan.primitives:
        if p.op == "local_move":
            local[p.a] = local.get(p.a, 0.0) + unit
    return peak / bandwidth, max(local.values(), default=0.0)


def simulate_strategy(plan: StrategyPlan, pull=None, push=None, param_bytes: float | None = None,
                      profile=None, config: SimConfig | None = None) -> SimReport:
    """Simulate one iteration: pull, propagation across pipelines, push."""
    cfg = config or SimConfig()
    for comm in (pull, push):
        if comm is not None and comm.strategy.canonical() != plan.strategy.canonical():
            raise ValidationError(f"mismatch: comm plan built for {comm.strategy}, plan uses {plan.strategy}")
    if (pull is not None or push is not None) and (profile is None or param_bytes is None):
        raise ValidationError("communication timing needs a profile and param_bytes")
    sims = []
    for scheme, pk in zip(plan.pipelines, plan.packings):
        if pk.v == 0:
            sims.append(PipelineSim(str(scheme), 0.0, 0.0, 0.0))
            continue
        lat, bub, tl = simulate_pipeline([t for _, t in pk.per_microbatch], scheme.pp, cfg)
        sims.append(PipelineSim(str(scheme), lat, bub, pk.objective, tl))
    prop = max(s.latency for s in sims)
    bw = profile.hardware.bandwidth if profile is not None else 1.0
    pull_s, pull_local = _comm_seconds(pull, param_bytes, bw)
    push_s, push_local = _comm_seconds(push, param_bytes, bw)
    if cfg.overlap_mode == "none":
        total = pull_s + prop + push_s
        after = (pull_s, push_s)
    else:
        eps = cfg.local_move_cost * (pull_local + push_local)
        total = max(prop, pull_s + push_s) + eps
        hidden = min(prop, pull_s + push_s)
        exposed = pull_s + push_s - hidden
        share = exposed / (pull_s + push_s) if pull_s + push_s else 0.0
        after = (pull_s * share, push_s * share)
    comm = {"pull": pull_s, "push": push_s, "pull_exposed": after[0], "push_exposed": after[1]}
    return SimReport(str(plan.strategy), sims, prop, comm, total, plan.estimated_latency, cfg)


def default_param_bytes(profile) -> float:
    """Two-byte parameters (and gradients) of the profiled model."""
    return 2.0 * profile.shape.params


def comm_plans(strategy: Strategy, n_gpus: int, profile):
    placement = build_placement(strategy, n_gpus, profile.shape.layers, allow_idle=True)
    return pull_plan(placement), push_plan(placement)


# ----------------------------------------------------------------- ablation ladder

def _baseline_plan(lengths, strategy, profile, packing):
    """Round-robin dispatch with either max-length FFD or objective-driven packing."""
    dplan = round_robin(lengths, strategy, profile)
    packings = []
    for scheme, members in zip(dplan.pipelines, dplan.groups(lengths)):
        sub = [lengths[i] for i in members]
        if not sub:
            packings.append(empty_plan(scheme.pp))
        elif packing == "ffd":
            packings.append(ffd_pack(sub, profile.max_len_of(scheme), stage_times(sub, scheme, profile), scheme.pp))
        else:
            packings.append(pack(sub, scheme, profile))
    est = max(p.objective for p in packings)
    return StrategyPlan(strategy, tuple(lengths), dplan, tuple(packings), est, {"baseline": packing})


def homogeneous_strategies(profile, n_gpus: int):
    out = []
    for s in sorted(profile.feasible_schemes(), key=str):
        if s.gpus <= n_gpus and n_gpus % s.gpus == 0:
            out.append(Strategy.homogeneous(s, n_gpus // s.gpus))
    return out


def _feasible_all(strategy, profile, longest):
    return max(profile.max_len_of(s) for s in strategy.schemes) >= longest


@dataclass
class Comparison:
    policies: tuple
    latencies: dict  # policy -> per-iteration simulated seconds
    balance: dict  # policy -> per-iteration max/min pipeline ratio
    strategies: dict  # policy -> per-iteration strategy text
    estimated: dict

    def mean(self, name):
        return float(np.mean(self.latencies[name]))

    def std(self, name):
        return float(np.std(self.latencies[name]))

    def rows(self):
        return [(p, self.mean(p), self.std(p)) for p in self.policies]

    def speedups(self):
        """``out[a][b]`` is how many times faster ``b`` is than ``a`` in mean latency."""
        return {a: {b: self.mean(a) / self.mean(b) for b in self.policies} for a in self.policies}

    def balance_wins(self, better="iv_dynamic", worse="i_static_ffd") -> float:
        """Share of iterations where ``better`` has a max/min ratio strictly closer to 1."""
        wins = [b < w for b, w in zip(self.balance[better], self.balance[worse])]
        return sum(wins) / len(wins)

    def strategy_frequency(self, name="iv_dynamic"):
        freq = {}
        for s in self.strategies[name]:
            freq[s] = freq.get(s, 0) + 1
        return dict(sorted(freq.items(), key=lambda kv: (-kv[1], kv[0])))

    def to_dict(self) -> dict:
        return {
            "schema_version": COMPARISON_SCHEMA,
            "rows": [{"policy": p, "mean": m, "std": s} for p, m, s in self.rows()],
            "speedups": self.speedups(),
            "latencies": self.latencies,
            "estimated": self.estimated,
            "balance": {k: [r if math.isfinite(r) else None for r in v] for k, v in self.balance.items()},
            "strategies": self.strategies,
            "strategy_frequency": self.strategy_frequency(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Comparison":
        if d.get("schema_version") != COMPARISON_SCHEMA:
            raise ValidationError(f"unsupported comparison schema {d.get('schema_version')!r}")
        policies = tuple(r["policy"] for r in d["rows"])
        balance = {k: [math.inf if r is None else r for r in v] for k, v in d["balance"].items()}
        return cls(policies, d["latencies"], balance, d["strategies"], d["estimated"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        base = self.policies[0]
        w.writerow(["policy", "mean_seconds", "std_seconds", f"speedup_vs_{base}"])
        for p, m, s in self.rows():
            w.writerow([p, repr(m), repr(s), repr(self.mean(base) / m)])
        return buf.getvalue()

    def to_vega(self) -> dict:
        values = [{"policy": p, "iteration": i, "latency": t}
                  for p in self.policies for i, t in enumerate(self.latencies[p])]
        return {
            "$schema": "https://vega.github.io/schema/vega-lite/v5.json",
            "data": {"values": values},
            "mark": "boxplot",
            "encoding": {
                "x": {"field": "policy", "type": "nominal", "sort": list(self.policies)},
                "y": {"field": "latency", "type": "quantitative", "title": "simulated seconds"},
            },
        }


def compare_policies(minibatches, candidates, profile, n_gpus: int, options: PlannerOptions | None = None,
                     config: SimConfig | None = None, param_bytes: float | None = None) -> Comparison:
    """Simulate the four-step ablation ladder on every mini-batch.

    (i) the best static homogeneous strategy with round-robin dispatch and
    max-length FFD packing; (ii) the same strategy and dispatch with
    objective-driven packing; (iii) the single strategy from the candidates
    (plus that homogeneous one) with the lowest mean under two-stage assignment;
    (iv) per-iteration selection among the same pool.  With ``param_bytes`` the
    pull/push communication is included.
    """
    opts = options or PlannerOptions()
    cfg = config or SimConfig(keep_timeline=False)
    batches = [list(getattr(mb, "lengths", mb)) for mb in minibatches]
    if not batches:
        raise ValidationError("need at least one mini-batch")
    longest = max(max(b) for b in batches if b)
    comm_cache = {}

    def sim(plan):
        pull = push = None
        if param_bytes is not None:
            key = str(plan.strategy)
            if key not in comm_cache:
                comm_cache[key] = comm_plans(plan.strategy, n_gpus, profile)
            pull, push = comm_cache[key]
        return simulate_strategy(plan, pull, push, param_bytes, profile, cfg)

    homs = [h for h in homogeneous_strategies(profile, n_gpus) if _feasible_all(h, profile, longest)]
    if not homs:
        raise InfeasibleError("no homogeneous strategy holds the longest sequence")
    best_h, best_mean, base_reports = None, math.inf, None
    for h in homs:
        reps = [sim(_baseline_plan(b, h, profile, "ffd")) for b in batches]
        m = math.fsum(r.iteration_latency for r in reps) / len(reps)
        if m < best_mean:
            best_h, best_mean, base_reports = h, m, reps
    reports = {POLICIES[0]: base_reports,
               POLICIES[1]: [sim(_baseline_plan(b, best_h, profile, "packed")) for b in batches]}

    pool = list(dict.fromkeys([*(c.canonical() for c in candidates), best_h.canonical()]))
    plans = {}
    for c in pool:
        row = []
        for b in batches:
            try:
                row.append(plan_strategy(b, c, profile, opts))
            except InfeasibleError:
                row.append(None)
        plans[str(c)] = row
    sims = {k: [sim(p) if p is not None else None for p in row] for k, row in plans.items()}
    fixed = None
    fixed_mean = math.inf
    for c in pool:
        row = sims[str(c)]
        if any(r is None for r in row):
            continue
        m = math.fsum(r.iteration_latency for r in row) / len(row)
        if m < fixed_mean:
            fixed, fixed_mean = c, m
    reports[POLICIES[2]] = sims[str(fixed)]
    dyn = []
    for i in range(len(batches)):
        best = best_of([plans[str(c)][i] for c in pool if plans[str(c)][i] is not None], opts)
        dyn.append(sims[str(best.strategy)][i])
    reports[POLICIES[3]] = dyn
    return Comparison(
        POLICIES,
        {p: [r.iteration_latency for r in reports[p]] for p in POLICIES},
        {p: [r.balance_ratio() for r in reports[p]] for p in POLICIES},
        {p: [r.strategy for r in reports[p]] for p in POLICIES},
        {p: [r.estimated_latency for r in reports[p]] for p in POLICIES},
    )


def schedule_lower_bound(microbatch_times, pp: int, forward_fraction=Fraction(1, 3)) -> float:
    """A bound every schedule of these micro-batches respects.

    The last stage waits for the first forward to cross ``pp - 1`` stages, does
    all its work, then the last backward crosses back; and any single
    micro-batch visits every stage twice.
    """
    T = [Fraction(float(t)) for t in microbatch_times]
    ff = Fraction(forward_fraction)
    chain = (pp - 1) * (T[0] * ff + T[-1] * (1 - ff)) + sum(T)
    return float(max(chain, pp * max(T)))
