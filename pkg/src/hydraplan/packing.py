"""Packing the sequences of one pipeline into micro-batches.

For a fixed micro-batch count ``v`` the objective is
``max_j time(j) * (pp - 1 + v)`` where ``time(j)`` adds the per-sequence
stage latencies of micro-batch ``j`` and every micro-batch must hold at most
``max_len`` tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import BudgetExhausted, InfeasibleError, ValidationError

EXACT_CUTOFF = 12
DEFAULT_NODE_BUDGET = 2_000_000


@dataclass(frozen=True)
class PackingPlan:
    assignment: tuple[int, ...]
    v: int
    pp: int
    objective: float
    per_microbatch: tuple[tuple[int, float], ...]
    optimal: bool = True

    @property
    def max_time(self) -> float:
        return max(t for _, t in self.per_microbatch) if self.per_microbatch else 0.0

    def microbatches(self):
        groups = [[] for _ in range(self.v)]
        for i, j in enumerate(self.assignment):
            groups[j].append(i)
        return groups

    def to_dict(self) -> dict:
        return {
            "assignment": list(self.assignment),
            "v": self.v,
            "pp": self.pp,
            "objective": self.objective,
            "per_microbatch": [[tok, t] for tok, t in self.per_microbatch],
            "optimal": self.optimal,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["assignment"]), d["v"], d["pp"], d["objective"],
                   tuple((tok, t) for tok, t in d["per_microbatch"]), d.get("optimal", True))


EMPTY_PLAN_V = 0


def empty_plan(pp: int) -> PackingPlan:
    return PackingPlan((), 0, pp, 0.0, ())


def score(lengths, times, assignment, v, pp) -> PackingPlan:
    """Build a plan from an assignment; sums are exact (``fsum``) and labels canonical."""
    relabel = {}
    canon = []
    for j in assignment:
        if j not in relabel:
            relabel[j] = len(relabel)
        canon.append(relabel[j])
    v_used = len(relabel)
    toks = [0] * v_used
    parts = [[] for _ in range(v_used)]
    for i, j in enumerate(canon):
        toks[j] += lengths[i]
        parts[j].append(times[i])
    sums = [math.fsum(p) for p in parts]
    per_mb = tuple(zip(toks, sums))
    objective = max(sums) * (pp - 1 + v_used) if sums else 0.0
    return PackingPlan(tuple(canon), v_used, pp, objective, per_mb)


def check_plan(plan: PackingPlan, lengths, times, cap) -> list[str]:
    """Structural audit of a plan against its inputs."""
    problems = []
    if len(plan.assignment) != len(lengths):
        return [f"assignment covers {len(plan.assignment)} of {len(lengths)} sequences"]
    if not lengths:
        return problems
    if any(not 0 <= j < plan.v for j in plan.assignment):
        problems.append("assignment label out of range")
        return problems
    fresh = score(lengths, times, plan.assignment, plan.v, plan.pp)
    if fresh.v != plan.v:
        problems.append(f"{plan.v - fresh.v} empty micro-batch(es)")
    for j, (tok, _) in enumerate(fresh.per_microbatch):
        if tok > cap:
            problems.append(f"micro-batch {j} holds {tok} tokens > max_len {cap}")
    if fresh.objective != plan.objective:
        problems.append(f"objective {plan.objective} != recomputed {fresh.objective}")
    return problems


def stage_times(lengths, scheme, profile):
    co = profile.coeffs_for(scheme)
    return [co(l) for l in lengths]


def v_range(lengths, scheme, profile) -> tuple[int, int]:
    cap = profile.max_len_of(scheme)
    for i, l in enumerate(lengths):
        if l > cap:
            raise InfeasibleError(f"sequence {i} of length {l} exceeds max_len {cap} of {scheme}", index=i)
    return _v_range(lengths, cap, profile.util_len_of(scheme))


def _v_range(lengths, cap, util):
    total = sum(lengths)
    v_min = max(-(-total // cap), 1)
    v_max = min(total // util if util else len(lengths), len(lengths))
    if v_max < v_min:
        return v_min, v_min
    return v_min, v_max


def pack_for_v(lengths, scheme, v, profile, mode="exact", node_budget=DEFAULT_NODE_BUDGET) -> PackingPlan:
    cap = profile.max_len_of(scheme)
    times = stage_times(lengths, scheme, profile)
    return _pack_for_v(list(lengths), times, cap, scheme.pp, v, mode, node_budget)


def _pack_for_v(lengths, times, cap, pp, v, mode, node_budget=DEFAULT_NODE_BUDGET):
    n = len(lengths)
    if not 1 <= v <= n:
        raise ValidationError(f"v={v} outside [1, {n}]")
    if max(lengths) > cap:
        raise InfeasibleError(f"a sequence exceeds max_len {cap}")
    if sum(lengths) > cap * v:
        raise InfeasibleError(f"{sum(lengths)} tokens cannot fit in {v} micro-batches of {cap}")
    seed = _heuristic(lengths, times, cap, v)
    if mode == "heuristic":
        if seed is None:
            raise InfeasibleError(f"no capacity-respecting packing into {v} micro-batches found")
        plan = score(lengths, times, seed, v, pp)
        return PackingPlan(plan.assignment, plan.v, pp, plan.objective, plan.per_microbatch, optimal=False)
    if mode != "exact":
        raise ValidationError(f"unknown packing mode {mode!r}")
    assignment, complete = _branch_and_bound(lengths, times, cap, v, seed, node_budget)
    if assignment is None:
        raise InfeasibleError(f"no capacity-respecting packing into {v} micro-batches exists")
    plan = score(lengths, times, assignment, v, pp)
    if not complete:
        plan = PackingPlan(plan.assignment, plan.v, pp, plan.objective, plan.per_microbatch, optimal=False)
    return plan


def _branch_and_bound(lengths, times, cap, v, seed, node_budget):
    n = len(lengths)
    order = sorted(range(n), key=lambda i: (-times[i], -lengths[i], i))
    t_sorted = [times[i] for i in order]
    l_sorted = [lengths[i] for i in order]
    # running sums follow the sorted order, so equal multisets get bit-identical loads
    best = [math.inf, None]
    if seed is not None:
        best = [_max_load(t_sorted, [seed[i] for i in order], v), [seed[i] for i in order]]
    total = sum(t_sorted)
    floor_bound = total / v
    loads = [0.0] * v
    toks = [0] * v
    cur = [0] * n
    nodes = [0]

    def rec(pos, used, cur_max):
        nodes[0] += 1
        if nodes[0] > node_budget:
            raise _Stop
        if pos == n:
            if used == v and cur_max < best[0]:
                best[0] = cur_max
                best[1] = cur.copy()
            return
        if v - used > n - pos:
            return
        t, l = t_sorted[pos], l_sorted[pos]
        seen = set()
        limit = used + 1 if used < v else v
        for b in range(limit):
            if toks[b] + l > cap:
                continue
            key = (loads[b], toks[b])
            if key in seen:
                continue
            seen.add(key)
            new = loads[b] + t
            m = new if new > cur_max else cur_max
            if m >= best[0] or floor_bound >= best[0]:
                continue
            old = loads[b]
            loads[b] = new
            toks[b] += l
            cur[pos] = b
            rec(pos + 1, used + (b == used), m)
            loads[b] = old
            toks[b] -= l

    complete = True
    try:
        rec(0, 0, 0.0)
    except _Stop:
        complete = False
    if best[1] is None:
        if not complete:
            raise BudgetExhausted("packing search exhausted its node budget without a feasible plan")
        return None, complete
    assignment = [0] * n
    for pos, i in enumerate(order):
        assignment[i] = best[1][pos]
    return assignment, complete


class _Stop(Exception):
    pass


def _max_load(t_sorted, assign_sorted, v):
    loads = [0.0] * v
    for t, b in zip(t_sorted, assign_sorted):
        loads[b] += t
    return max(loads)


def _heuristic(lengths, times, cap, v):
    """Longest-processing-time seeding followed by move/swap local search."""
    n = len(lengths)
    order = sorted(range(n), key=lambda i: (-times[i], -lengths[i], i))
    assign = _lpt(order, lengths, times, cap, v)
    if assign is None:
        assign = _ffd_into(lengths, cap, v)
        if assign is None:
            return None
    return _local_search(assign, lengths, times, cap, v)


def _lpt(order, lengths, times, cap, v):
    loads = [0.0] * v
    toks = [0] * v
    assign = [0] * len(lengths)
    for i in order:
        best = None
        for b in range(v):
            if toks[b] + lengths[i] <= cap and (best is None or loads[b] < loads[best]):
                best = b
        if best is None:
            return None
        assign[i] = best
        loads[best] += times[i]
        toks[best] += lengths[i]
    if len(set(assign)) < v:
        return None
    return assign


def _ffd_into(lengths, cap, v):
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i], i))
    toks = [0] * v
    count = [0] * v
    assign = [0] * len(lengths)
    remaining = len(lengths)
    for i in order:
        empties = sum(1 for c in count if c == 0)
        remaining -= 1
        # once the remaining items can only just fill the empty bins, force them there
        choices = [b for b in range(v) if count[b] == 0] if empties > remaining else range(v)
        placed = False
        for b in choices:
            if toks[b] + lengths[i] <= cap:
                assign[i] = b
                toks[b] += lengths[i]
                count[b] += 1
                placed = True
                break
        if not placed:
            return None
    if min(count) == 0:
        return None
    return assign


def _local_search(assign, lengths, times, cap, v, max_rounds=10_000):
    loads = [0.0] * v
    toks = [0] * v
    members = [[] for _ in range(v)]
    for i, b in enumerate(assign):
        loads[b] += times[i]
        toks[b] += lengths[i]
        members[b].append(i)

    def key():
        top = max(loads)
        return (top, sum(1 for x in loads if x == top))

    for _ in range(max_rounds):
        current = key()
        top = current[0]
        src = max(range(v), key=lambda b: (loads[b], -b))
        improved = False
        # moves out of the heaviest micro-batch
        if len(members[src]) > 1:
            for i in sorted(members[src], key=lambda i: -times[i]):
                for dst in range(v):
                    if dst == src or toks[dst] + lengths[i] > cap:
                        continue
                    if loads[dst] + times[i] < top:
                        _move(i, src, dst, loads, toks, members, times, lengths)
                        if key() < current:
                            improved = True
                            break
                        _move(i, dst, src, loads, toks, members, times, lengths)
                if improved:
                    break
        if not improved:
            for i in sorted(members[src], key=lambda i: -times[i]):
                for dst in range(v):
                    if dst == src:
                        continue
                    for k in members[dst]:
                        gain = times[i] - times[k]
                        if gain <= 0:
                            continue
                        if toks[dst] - lengths[k] + lengths[i] > cap or toks[src] - lengths[i] + lengths[k] > cap:
                            continue
                        if loads[dst] + gain >= top:
                            continue
                        _swap(i, src, k, dst, loads, toks, members, times, lengths)
                        if key() < current:
                            improved = True
                            break
                        _swap(k, src, i, dst, loads, toks, members, times, lengths)
                    if improved:
                        break
                if improved:
                    break
        if not improved:
            break
    out = [0] * len(lengths)
    for b, ms in enumerate(members):
        for i in ms:
            out[i] = b
    return out


def _move(i, src, dst, loads, toks, members, times, lengths):
    members[src].remove(i)
    members[dst].append(i)
    loads[src] = math.fsum(times[k] for k in members[src])
    loads[dst] = math.fsum(times[k] for k in members[dst])
    toks[src] -= lengths[i]
    toks[dst] += lengths[i]


def _swap(i, src, k, dst, loads, toks, members, times, lengths):
    members[src].remove(i)
    members[dst].remove(k)
    members[src].append(k)
    members[dst].append(i)
    loads[src] = math.fsum(times[x] for x in members[src])
    loads[dst] = math.fsum(times[x] for x in members[dst])
    toks[src] += lengths[k] - lengths[i]
    toks[dst] += lengths[i] - lengths[k]


def pack(lengths, scheme, profile, mode="auto", exact_cutoff=EXACT_CUTOFF, node_budget=DEFAULT_NODE_BUDGET):
    """Best plan over the pruned micro-batch range; ties go to the smaller ``v``."""
    lengths = list(lengths)
    if not lengths:
        return empty_plan(scheme.pp)
    lo, hi = v_range(lengths, scheme, profile)
    cap = profile.max_len_of(scheme)
    times = stage_times(lengths, scheme, profile)
    return _pack_range(lengths, times, cap, scheme.pp, lo, hi, mode, exact_cutoff, node_budget)


def _pack_range(lengths, times, cap, pp, lo, hi, mode="auto", exact_cutoff=EXACT_CUTOFF,
                node_budget=DEFAULT_NODE_BUDGET):
    if mode == "auto":
        mode = "exact" if len(lengths) <= exact_cutoff else "heuristic"
    best = None
    for v in range(lo, hi + 1):
        try:
            plan = _pack_for_v(lengths, times, cap, pp, v, mode, node_budget)
        except InfeasibleError:
            continue
        except BudgetExhausted:
            plan = _pack_for_v(lengths, times, cap, pp, v, "heuristic")
        if best is None or plan.objective < best.objective:
            best = plan
    if best is None:
        raise InfeasibleError(f"no feasible packing for v in [{lo}, {hi}]")
    return best


def ffd_pack(lengths, cap, times=None, pp=1) -> PackingPlan:
    """Max-length first-fit-decreasing packing: fewest micro-batches by tokens only."""
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i], i))
    toks = []
    assign = [0] * len(lengths)
    for i in order:
        if lengths[i] > cap:
            raise InfeasibleError(f"sequence {i} of length {lengths[i]} exceeds max_len {cap}", index=i)
        for b, t in enumerate(toks):
            if t + lengths[i] <= cap:
                toks[b] += lengths[i]
                assign[i] = b
                break
        else:
            toks.append(lengths[i])
            assign[i] = len(toks) - 1
    times = times if times is not None else [0.0] * len(lengths)
    return score(list(lengths), list(times), assign, len(toks), pp)
