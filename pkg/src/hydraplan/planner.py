"""Per-iteration planning: dispatch, then pack each pipeline, then pick the fastest strategy."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field

from .dispatch import EXACT_LIMIT, DispatchPlan, dispatch_exact, dispatch_greedy, refine_balance
from .errors import BudgetExhausted, InfeasibleError, ValidationError
from .packing import EXACT_CUTOFF, PackingPlan, pack
from .schemes import Strategy, validate_strategy

PLAN_SCHEMA = "hydraplan.plan/1"


@dataclass(frozen=True)
class PlannerOptions:
    trials: int = 100
    seed: int = 0
    exact_dispatch_cutoff: int = 10
    dispatch_node_budget: int = 2_000_000
    pack_mode: str = "auto"
    pack_exact_cutoff: int = EXACT_CUTOFF
    penalize_idle: bool = False
    refine_balance: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise ValidationError("trials must be >= 1")
        if self.exact_dispatch_cutoff > EXACT_LIMIT:
            raise ValidationError(f"exact_dispatch_cutoff may not exceed {EXACT_LIMIT}")
        if self.pack_mode not in ("auto", "exact", "heuristic"):
            raise ValidationError(f"unknown pack mode {self.pack_mode!r}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class StrategyPlan:
    strategy: Strategy
    lengths: tuple[int, ...]
    dispatch: DispatchPlan
    packings: tuple[PackingPlan, ...]
    estimated_latency: float
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def pipelines(self):
        return self.dispatch.pipelines

    def members(self):
        """Global sequence indices per pipeline, in dispatch order."""
        return self.dispatch.groups(self.lengths)

    @property
    def has_idle_pipeline(self) -> bool:
        return any(p.v == 0 for p in self.packings)

    def pipeline_latencies(self):
        return [p.objective for p in self.packings]

    def to_dict(self) -> dict:
        return {
            "schema_version": PLAN_SCHEMA,
            "strategy": str(self.strategy),
            "lengths": list(self.lengths),
            "dispatch": self.dispatch.to_dict(),
            "packings": [p.to_dict() for p in self.packings],
            "estimated_latency": self.estimated_latency,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyPlan":
        if d.get("schema_version") != PLAN_SCHEMA:
            raise ValidationError(f"unsupported plan schema {d.get('schema_version')!r}")
        return cls(
            Strategy.parse(d["strategy"]),
            tuple(d["lengths"]),
            DispatchPlan.from_dict(d["dispatch"]),
            tuple(PackingPlan.from_dict(p) for p in d["packings"]),
            d["estimated_latency"],
            d.get("diagnostics", {}),
        )


def _dispatch(lengths, strategy, profile, opts):
    if len(lengths) <= opts.exact_dispatch_cutoff:
        try:
            plan = dispatch_exact(lengths, strategy, profile, node_budget=opts.dispatch_node_budget,
                                  seed=opts.seed)
        except BudgetExhausted as exc:
            plan = exc.incumbent
    else:
        plan = dispatch_greedy(lengths, strategy, profile, trials=opts.trials, seed=opts.seed)
    return refine_balance(lengths, plan, profile) if opts.refine_balance else plan


def plan_strategy(minibatch, strategy: Strategy, profile, options: PlannerOptions | None = None,
                  n_gpus: int | None = None) -> StrategyPlan:
    opts = options or PlannerOptions()
    lengths = list(getattr(minibatch, "lengths", minibatch))
    if n_gpus is not None:
        problems = validate_strategy(strategy, n_gpus)
        if problems:
            raise ValidationError(f"{strategy}: " + "; ".join(problems))
    dplan = _dispatch(lengths, strategy, profile, opts)
    packings = []
    for scheme, members in zip(dplan.pipelines, dplan.groups(lengths)):
        sub = [lengths[i] for i in members]
        packings.append(pack(sub, scheme, profile, mode=opts.pack_mode, exact_cutoff=opts.pack_exact_cutoff))
    est = max(p.objective for p in packings)
    diag = {
        "tokens": [sum(lengths[i] for i in m) for m in dplan.groups(lengths)],
        "microbatches": [p.v for p in packings],
        "empty_pipelines": [p.v == 0 for p in packings],
    }
    return StrategyPlan(strategy, tuple(lengths), dplan, tuple(packings), est, diag)


def check_plan(plan: StrategyPlan) -> list[str]:
    problems = []
    if plan.estimated_latency != max(p.objective for p in plan.packings):
        problems.append("estimated latency is not the max pipeline objective")
    if plan.estimated_latency < plan.dispatch.objective:
        problems.append("estimated latency below the dispatch bound")
    seen = Counter()
    for members, pk in zip(plan.members(), plan.packings):
        if len(members) != len(pk.assignment):
            problems.append("packing does not cover its pipeline's sequences")
        seen.update(plan.lengths[i] for i in members)
    if seen != Counter(plan.lengths):
        problems.append("sequence multiset not conserved")
    return problems


def _score(plan: StrategyPlan, opts: PlannerOptions) -> float:
    if not opts.penalize_idle or not plan.has_idle_pipeline:
        return plan.estimated_latency
    busy = sum(s.gpus for s, pk in zip(plan.pipelines, plan.packings) if pk.v)
    return plan.estimated_latency * plan.strategy.total_gpus / busy


@dataclass(frozen=True)
class CandidateResult:
    strategy: str
    latency: float | None
    reason: str | None = None
    idle: bool = False

    def to_dict(self):
        return asdict(self)


def select_strategy(minibatch, candidates, profile, options: PlannerOptions | None = None):
    """Best feasible plan and one report row per candidate.

    Ties are broken toward fewer total GPUs, then the lexicographically smaller
    strategy text.
    """
    opts = options or PlannerOptions()
    if not candidates:
        raise ValidationError("candidate list is empty")
    plans = []
    report = []
    for strat in candidates:
        try:
            plan = plan_strategy(minibatch, strat, profile, opts)
        except InfeasibleError as exc:
            report.append(CandidateResult(str(strat), None, str(exc)))
            continue
        report.append(CandidateResult(str(strat), plan.estimated_latency, None, plan.has_idle_pipeline))
        plans.append(plan)
    if not plans:
        raise AllInfeasible("no candidate strategy can serve this mini-batch", report)
    return best_of(plans, opts), report


def best_of(plans, options: PlannerOptions | None = None) -> StrategyPlan:
    """Lowest score; ties go to fewer GPUs, then the smaller strategy text."""
    opts = options or PlannerOptions()
    if not plans:
        raise ValidationError("no plans to choose from")
    return min(plans, key=lambda p: (_score(p, opts), p.strategy.total_gpus, str(p.strategy)))


class AllInfeasible(InfeasibleError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report

