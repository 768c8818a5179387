import functools
import itertools
import json
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_profile
from oracles import brute_pack
from hydraplan.errors import InfeasibleError, ValidationError
from hydraplan.packing import v_range
from hydraplan.planner import (
    AllInfeasible,
    PlannerOptions,
    StrategyPlan,
    check_plan,
    plan_strategy,
    select_strategy,
)
from hydraplan.schemes import ParallelScheme, Strategy

P1 = ParallelScheme(1, 1, 1)
P8 = ParallelScheme(8, 1, 1)
P2 = ParallelScheme(2, 2, 1)


def two_tier_profile():
    return make_profile(
        {P8: (2e-9, 2e-5, 0.02), P1: (1.6e-8, 1.2e-4, 0.005), P2: (4e-9, 4e-5, 0.006)},
        {P8: 32768, P1: 4096, P2: 9000},
    )


def test_homogeneous_symmetric_balance():
    prof = make_profile({P1: (0.0, 1.0, 0.0)}, {P1: 100})
    plan = plan_strategy([10, 10, 10, 10], Strategy.homogeneous(P1, 4), prof)
    assert plan.estimated_latency == 10.0
    assert plan.pipeline_latencies() == [10.0] * 4
    assert check_plan(plan) == []


def test_infeasible_when_nothing_fits():
    prof = two_tier_profile()
    with pytest.raises(InfeasibleError):
        plan_strategy([5000], Strategy.homogeneous(P1, 4), prof)


def test_rejects_oversized_strategy():
    with pytest.raises(ValidationError):
        plan_strategy([10], Strategy.homogeneous(P8, 3), two_tier_profile(), n_gpus=16)


@pytest.mark.parametrize("seed", range(12))
def test_estimate_dominates_global_optimum(seed):
    rng = random.Random(seed)
    prof = two_tier_profile()
    pipes = [P8] + [rng.choice([P1, P2, P8]) for _ in range(rng.randint(0, 2))]
    strat = Strategy(tuple((p, 1) for p in pipes))
    lengths = [rng.randint(50, 6000) for _ in range(rng.randint(1, 7))]
    plan = plan_strategy(lengths, strat, prof)
    assert check_plan(plan) == []

    @functools.lru_cache(maxsize=None)
    def best_pack(scheme, group):
        if not group:
            return 0.0
        lo, hi = v_range(list(group), scheme, prof)
        return brute_pack(list(group), prof.coeffs_for(scheme), prof.max_len_of(scheme), scheme.pp,
                          set(range(lo, hi + 1)))

    ordered = plan.pipelines
    optimum = math.inf
    for assign in itertools.product(range(len(ordered)), repeat=len(lengths)):
        groups = [[] for _ in ordered]
        if any(lengths[i] > prof.max_len_of(ordered[j]) for i, j in enumerate(assign)):
            continue
        for i, j in enumerate(assign):
            groups[j].append(lengths[i])
        optimum = min(optimum, max(best_pack(p, tuple(sorted(g))) for p, g in zip(ordered, groups)))
    assert plan.estimated_latency >= optimum


def test_select_degenerate_and_dominated():
    prof = two_tier_profile()
    lengths = [3000, 200, 500, 800, 12000]
    only = Strategy.homogeneous(P8, 2)
    best, report = select_strategy(lengths, [only], prof)
    assert best.strategy == only and len(report) == 1


def test_selection_matches_recomputation():
    rng = random.Random(11)
    prof = two_tier_profile()
    lengths = [min(32768, int(rng.lognormvariate(7, 1.3)) + 1) for _ in range(40)]
    a = Strategy(((P8, 1), (P1, 8)))
    b = Strategy.homogeneous(P8, 2)
    best, report = select_strategy(lengths, [a, b], prof)
    lat = {}
    for s in (a, b):
        try:
            lat[str(s)] = plan_strategy(lengths, s, prof).estimated_latency
        except InfeasibleError:
            pass
    assert best.estimated_latency == min(lat.values())
    assert {r.strategy: r.latency for r in report if r.latency is not None} == lat


def test_tie_break_prefers_fewer_gpus():
    prof = make_profile({P1: (0.0, 1.0, 0.0)}, {P1: 100})
    # one sequence: every extra pipeline idles, latency identical
    best, _ = select_strategy([10], [Strategy.homogeneous(P1, 4), Strategy.homogeneous(P1, 2)], prof)
    assert str(best.strategy) == "1x1x1*2"
    assert best.has_idle_pipeline


def test_all_infeasible_reports_every_candidate():
    prof = two_tier_profile()
    with pytest.raises(AllInfeasible) as exc:
        select_strategy([40000], [Strategy.homogeneous(P1, 2), Strategy.homogeneous(P8, 1)], prof)
    assert len(exc.value.report) == 2
    assert all(r.reason for r in exc.value.report)


def test_infeasible_candidate_falls_back_to_safety():
    prof = two_tier_profile()
    best, report = select_strategy([20000, 100], [Strategy.homogeneous(P1, 8), Strategy.homogeneous(P8, 1)], prof)
    assert best.strategy == Strategy.homogeneous(P8, 1)
    assert report[0].latency is None


def test_json_round_trip():
    prof = two_tier_profile()
    plan = plan_strategy([100, 4000, 900, 30], Strategy(((P8, 1), (P1, 2))), prof)
    text = json.dumps(plan.to_dict(), sort_keys=True)
    back = StrategyPlan.from_dict(json.loads(text))
    assert back == plan
    assert json.dumps(back.to_dict(), sort_keys=True) == text


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 9000), min_size=1, max_size=40), st.integers(0, 1000))
def test_heterogeneous_never_worse_than_included_homogeneous(lengths, seed):
    prof = two_tier_profile()
    homo = Strategy.homogeneous(P8, 2)
    cands = [homo, Strategy(((P8, 1), (P1, 8))), Strategy(((P8, 1), (P2, 2)))]
    opts = PlannerOptions(seed=seed, trials=20)
    best, _ = select_strategy(lengths, cands, prof, opts)
    assert best.estimated_latency <= plan_strategy(lengths, homo, prof, opts).estimated_latency
    assert check_plan(best) == []
