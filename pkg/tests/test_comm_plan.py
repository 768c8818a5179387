import json
import math
from collections import Counter
from fractions import Fraction

import pytest

from conftest import make_profile
from hydraplan.comm_plan import (
    audit,
    build_placement,
    mutual_granularity,
    overlap_feasible,
    pull_plan,
    push_plan,
    reduce_to_collectives,
    volumes,
)
from hydraplan.errors import ValidationError
from hydraplan.schemes import ParallelScheme, Strategy, enumerate_schemes, enumerate_strategies

W = 1_000_000.0
LAYERS = 32


def strategies(n):
    return enumerate_strategies(n, enumerate_schemes(n, LAYERS))


def coverage_counts(placement, rects, gran):
    return Counter(sl for r in rects for sl in placement.slices_of(r, gran))


def test_mutual_granularity_of_four_and_six():
    assert mutual_granularity(4, 6) == 12


def test_zero_like_worst_case_needs_everything():
    pl = build_placement(Strategy.homogeneous(ParallelScheme(1, 1, 1), 4), 4, LAYERS)
    assert all(r == (0, 1, 0, 1) for r in pl.needed)
    assert [r[3] - r[2] for r in pl.owned] == [Fraction(1, 4)] * 4


def test_aligned_tensor_parallel_is_all_local():
    pl = build_placement(Strategy.homogeneous(ParallelScheme(4, 1, 1), 1), 4, LAYERS)
    assert pl.needed == pl.owned
    for plan in (pull_plan(pl), push_plan(pl)):
        assert all(p.op == "local_move" for p in plan.primitives)
        assert all(v["net_sent"] == 0 and v["net_received"] == 0 for v in volumes(plan, W).values())


def test_stage_split_coverage():
    pl = build_placement(Strategy.homogeneous(ParallelScheme(2, 2, 1), 1), 4, LAYERS)
    cover = coverage_counts(pl, pl.needed, 2)
    assert set(cover.values()) == {1}
    assert len(cover) == pl.layer_blocks * 2
    assert pl.needed[0] == (0, Fraction(1, 2), 0, Fraction(1, 2))


def test_cp_ranks_replicate():
    pl = build_placement(Strategy.homogeneous(ParallelScheme(1, 1, 2), 2), 4, LAYERS)
    cover = coverage_counts(pl, pl.needed, 4)
    assert set(cover.values()) == {4}  # two pipelines x two cp ranks


@pytest.mark.parametrize("n", [4, 8])
def test_every_strategy_audits_clean(n):
    seen_equal = False
    for strat in strategies(n):
        pl = build_placement(strat, n, LAYERS)
        # optimization layout partitions the space exactly
        own = coverage_counts(pl, pl.owned, mutual_granularity(n, strat.tp_max))
        assert set(own.values()) == {1} and len(own) == pl.layer_blocks * mutual_granularity(n, strat.tp_max)
        assert [lo for lo, _ in pl.optimization] == [Fraction(g, n) for g in range(n)]
        pull, push = pull_plan(pl), push_plan(pl)
        assert pull.granularity == math.lcm(n, strat.tp_max)
        assert push.granularity == math.lcm(n, strat.cp_replicas * strat.tp_max)
        assert audit(pull, pl) == [] and audit(push, pl) == []
        for plan in (pull, push):
            vols = volumes(plan, W)
            top = max(max(v["sent"], v["received"]) for v in vols.values())
            assert top <= W * (1 + 1e-12)
            if strat.is_homogeneous() and strat.schemes[0].tp == 1 and strat.schemes[0].pp == 1:
                assert all(v["sent"] == pytest.approx(W) and v["received"] == pytest.approx(W)
                           for v in vols.values())
                seen_equal = True
        if strat.is_homogeneous():
            assert reduce_to_collectives(pull) == "all_gather"
            assert reduce_to_collectives(push) == "reduce_scatter"
    assert seen_equal


@pytest.mark.parametrize("n", [4, 8])
def test_mixed_tp_is_general(n):
    strat = Strategy(((ParallelScheme(2, 1, 1), 1), (ParallelScheme(1, 1, 1), n - 2)))
    pl = build_placement(strat, n, LAYERS)
    assert reduce_to_collectives(pull_plan(pl)) == "general"
    assert reduce_to_collectives(push_plan(pl)) == "general"


def test_heterogeneous_push_delivers_each_owned_slice_once():
    strat = Strategy(((ParallelScheme(2, 1, 1), 1), (ParallelScheme(1, 1, 1), 2)))
    pl = build_placement(strat, 4, LAYERS)
    plan = push_plan(pl)
    assert plan.granularity == 12
    got = Counter()
    for dst, items in plan.deliveries().items():
        for sl, _ in items:
            got[(dst, sl)] += 1
    assert set(got.values()) == {1}
    owner = pl.owner_table(12)
    assert {(o, sl) for sl, o in owner.items()} == set(got)


def test_zero_like_volume_matches_closed_form():
    n = 8
    pl = build_placement(Strategy.homogeneous(ParallelScheme(1, 1, 1), n), n, LAYERS)
    vols = volumes(pull_plan(pl), W)
    for v in vols.values():
        assert v["received"] == pytest.approx(W)
        assert v["sent"] == pytest.approx(W / n * n)
        assert v["net_received"] == pytest.approx(W * (n - 1) / n)


def test_pull_receive_bounded_by_tp_share():
    strat = Strategy(((ParallelScheme(4, 1, 1), 1), (ParallelScheme(2, 1, 1), 2)))
    pl = build_placement(strat, 8, LAYERS)
    vols = volumes(pull_plan(pl), W)
    for g, role in enumerate(pl.roles):
        assert vols[g]["received"] <= W / role.scheme.tp * (1 + 1e-12)


def test_partial_strategy_rejected():
    with pytest.raises(ValidationError):
        build_placement(Strategy.homogeneous(ParallelScheme(2, 1, 1), 1), 4, LAYERS)
    with pytest.raises(ValidationError):
        build_placement(Strategy.homogeneous(ParallelScheme(1, 3, 1), 1), 3, 32)


def test_serialization_and_dot():
    strat = Strategy(((ParallelScheme(2, 1, 1), 1), (ParallelScheme(1, 1, 1), 2)))
    pl = build_placement(strat, 4, LAYERS)
    plan = pull_plan(pl)
    d = plan.to_dict(param_bytes=W)
    assert json.loads(json.dumps(d))["classification"] == "general"
    dot = plan.to_dot()
    assert dot.startswith("digraph pull") and "g0 -> " in dot


def test_overlap_threshold_boundary():
    s = ParallelScheme(16, 1, 1)
    prof = make_profile({s: (0, 1e-6, 0)}, {s: 100000}, flops=19.5e12, bandwidth=200e9)
    assert overlap_feasible(s, 1560, prof)
    assert not overlap_feasible(s, 1559, prof)
    one = ParallelScheme(1, 1, 1)
    assert overlap_feasible(one, 1, make_profile({one: (0, 1, 0)}, {one: 10}, flops=5e9, bandwidth=5e9))
