"""Dispatching a mini-batch across the pipelines of a strategy.

Each pipeline ``j`` is scored by the bound ``sum T_j(l) + T_j(max l) * (pp_j - 1)``
over the sequences it receives; the plan minimizes the largest bound.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numba import njit

from .errors import BudgetExhausted, InfeasibleError, ValidationError

EXACT_LIMIT = 24
DEFAULT_NODE_BUDGET = 5_000_000


@dataclass(frozen=True)
class DispatchPlan:
    pipelines: tuple  # schemes, sorted by descending max_len
    assignment: tuple[int, ...]
    per_pipeline_bound: tuple[float, ...]
    objective: float
    optimal: bool = False
    method: str = "greedy"

    def groups(self, lengths):
        out = [[] for _ in self.pipelines]
        for i, j in enumerate(self.assignment):
            out[j].append(i)
        return out

    def to_dict(self) -> dict:
        return {
            "pipelines": [str(p) for p in self.pipelines],
            "assignment": list(self.assignment),
            "per_pipeline_bound": list(self.per_pipeline_bound),
            "objective": self.objective,
            "optimal": self.optimal,
            "method": self.method,
        }

    @classmethod
    def from_dict(cls, d):
        from .schemes import ParallelScheme

        return cls(tuple(ParallelScheme.parse(p) for p in d["pipelines"]), tuple(d["assignment"]),
                   tuple(d["per_pipeline_bound"]), d["objective"], d["optimal"], d["method"])


def ordered_pipelines(strategy, profile) -> list:
    """Pipelines of ``strategy`` by descending max_len; ties keep strategy order."""
    pipes = strategy.pipelines()
    return sorted(pipes, key=lambda p: -profile.max_len_of(p))


def feasibility_horizon(length, max_lens) -> int:
    """Number ``J`` of leading pipelines able to hold ``length``; pipelines ``0..J-1`` are feasible."""
    if not max_lens or length > max_lens[0]:
        raise InfeasibleError(f"length {length} exceeds every pipeline's max_len")
    lo, hi = 1, len(max_lens)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if max_lens[mid - 1] >= length:
            lo = mid
        else:
            hi = mid - 1
    return lo


def lower_bound(assigned_lengths, scheme, profile) -> float:
    """``sum T(l) + T(max l) * (pp - 1)``, rounded toward minus infinity.

    Rounding down keeps the bound below any packing objective even when the
    two agree mathematically.
    """
    if len(assigned_lengths) == 0:
        return 0.0
    co = profile.coeffs_for(scheme)
    terms = [co(l) for l in assigned_lengths]
    return _sum_down(terms, co(max(assigned_lengths)), scheme.pp - 1)


def _sum_down(terms, t_max, k):
    hi = t_max * k
    # the product's rounding error is itself a float, so fsum sees the exact value
    lo = float(Fraction(t_max) * k - Fraction(hi))
    parts = [*terms, hi, lo]
    f = math.fsum(parts)
    if math.fsum([*parts, -f]) < 0:
        f = math.nextafter(f, -math.inf)
    return f


def _prepare(lengths, strategy, profile):
    pipes = ordered_pipelines(strategy, profile)
    caps = [profile.max_len_of(p) for p in pipes]
    if any(c > p for c, p in zip(caps[1:], caps)):
        raise ValidationError("pipelines must be sorted by descending max_len")
    horizon = []
    for i, l in enumerate(lengths):
        try:
            horizon.append(feasibility_horizon(l, caps))
        except InfeasibleError:
            raise InfeasibleError(f"sequence {i} of length {l} fits no pipeline of {strategy}", index=i) from None
    coeffs = [profile.coeffs_for(p) for p in pipes]
    arr = np.asarray(lengths, dtype=np.float64)
    times = np.empty((len(lengths), len(pipes)))
    for j, co in enumerate(coeffs):
        times[:, j] = co(arr)
    extra = times * np.asarray([p.pp - 1 for p in pipes], dtype=np.float64)
    return pipes, np.asarray(horizon, dtype=np.int64), times, extra


def _finish(lengths, pipes, assignment, profile, optimal, method):
    groups = [[] for _ in pipes]
    for i, j in enumerate(assignment):
        groups[j].append(lengths[i])
    bounds = tuple(lower_bound(g, p, profile) for g, p in zip(groups, pipes))
    return DispatchPlan(tuple(pipes), tuple(int(j) for j in assignment), bounds, max(bounds), optimal, method)


def check_dispatch(plan: DispatchPlan, lengths, profile) -> list[str]:
    problems = []
    if len(plan.assignment) != len(lengths):
        return [f"assignment covers {len(plan.assignment)} of {len(lengths)} sequences"]
    for i, j in enumerate(plan.assignment):
        if not 0 <= j < len(plan.pipelines):
            problems.append(f"sequence {i} assigned to missing pipeline {j}")
        elif lengths[i] > profile.max_len_of(plan.pipelines[j]):
            problems.append(f"sequence {i} exceeds max_len of pipeline {j}")
    if problems:
        return problems
    fresh = _finish(list(lengths), plan.pipelines, plan.assignment, profile, plan.optimal, plan.method)
    if fresh.per_pipeline_bound != plan.per_pipeline_bound:
        problems.append("per-pipeline bounds differ from recomputation")
    if fresh.objective != plan.objective:
        problems.append("objective differs from recomputation")
    return problems


@njit(cache=True)
def _greedy_kernel(times, extra, horizon, perms):
    n_trials, n = perms.shape
    d = times.shape[1]
    best_obj = np.inf
    best_assign = np.zeros(n, dtype=np.int64)
    assign = np.zeros(n, dtype=np.int64)
    cost = np.zeros(d)
    ext = np.zeros(d)
    for t in range(n_trials):
        cost[:] = 0.0
        ext[:] = 0.0
        for step in range(n):
            i = perms[t, step]
            # the two largest C+E values make "max over the others" O(1)
            top1 = -1.0
            top1_j = -1
            top2 = -1.0
            for k in range(d):
                v = cost[k] + ext[k]
                if v > top1:
                    top2 = top1
                    top1 = v
                    top1_j = k
                elif v > top2:
                    top2 = v
            chosen = -1
            chosen_val = np.inf
            for j in range(horizon[i]):
                c = cost[j] + times[i, j]
                e = ext[j] if ext[j] > extra[i, j] else extra[i, j]
                other = top2 if j == top1_j else top1
                if other < 0.0:
                    other = 0.0
                o = c + e if c + e > other else other
                # ties go to the later (cheaper, shorter-capacity) pipeline
                if o <= chosen_val:
                    chosen_val = o
                    chosen = j
            assign[i] = chosen
            cost[chosen] += times[i, chosen]
            if extra[i, chosen] > ext[chosen]:
                ext[chosen] = extra[i, chosen]
        obj = 0.0
        for k in range(d):
            if cost[k] + ext[k] > obj:
                obj = cost[k] + ext[k]
        if obj < best_obj:
            best_obj = obj
            best_assign[:] = assign
    return best_assign


def trial_permutations(n, trials, seed) -> np.ndarray:
    """One independent stream per trial, derived from ``(seed, trial)``."""
    out = np.empty((trials, n), dtype=np.int64)
    for t in range(trials):
        out[t] = np.random.default_rng([seed, t]).permutation(n)
    return out


def dispatch_greedy(lengths, strategy, profile, trials: int = 100, seed: int = 0) -> DispatchPlan:
    lengths = list(lengths)
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    pipes, horizon, times, extra = _prepare(lengths, strategy, profile)
    if not lengths:
        return _finish(lengths, pipes, [], profile, True, "greedy")
    assign = _greedy_kernel(times, extra, horizon, trial_permutations(len(lengths), trials, seed))
    return _finish(lengths, pipes, assign.tolist(), profile, len(pipes) == 1, "greedy")


def dispatch_exact(lengths, strategy, profile, node_budget: int = DEFAULT_NODE_BUDGET,
                   exact_limit: int = EXACT_LIMIT, seed: int = 0) -> DispatchPlan:
    """Minimax-optimal dispatch by branch-and-bound.

    Raises :class:`BudgetExhausted` carrying the incumbent plan when the node
    budget runs out before optimality is proven.
    """
    lengths = list(lengths)
    if len(lengths) > exact_limit:
        raise ValidationError(f"{len(lengths)} sequences exceed the exact-dispatch limit {exact_limit}")
    pipes, horizon, times, extra = _prepare(lengths, strategy, profile)
    n, d = times.shape
    if n == 0:
        return _finish(lengths, pipes, [], profile, True, "exact")
    seed_assign = _greedy_kernel(times, extra, horizon, trial_permutations(n, 20, seed)).tolist()
    # longest first: the first sequence a pipeline receives fixes its extra term
    order = sorted(range(n), key=lambda i: (-lengths[i], i))
    T = times.tolist()
    E = extra.tolist()
    H = horizon.tolist()
    cheapest = [min(T[i][:H[i]]) for i in order]
    rest = [0.0] * (n + 1)
    for pos in range(n - 1, -1, -1):
        rest[pos] = rest[pos + 1] + cheapest[pos]
    kinds = [str(p) for p in pipes]

    def score(assign):
        cost = [0.0] * d
        ext = [0.0] * d
        for i in order:
            j = assign[i]
            cost[j] += T[i][j]
            ext[j] = max(ext[j], E[i][j])
        return max(c + e for c, e in zip(cost, ext))

    best = [score(seed_assign), list(seed_assign)]
    cost = [0.0] * d
    ext = [0.0] * d
    cur = [0] * n
    nodes = [0]

    def rec(pos, cur_max, total):
        nodes[0] += 1
        if nodes[0] > node_budget:
            raise _Stop
        if pos == n:
            if cur_max < best[0]:
                best[0] = cur_max
                best[1] = list(cur)
            return
        if (total + rest[pos]) / d >= best[0]:
            return
        i = order[pos]
        seen = set()
        for j in range(H[i]):
            key = (kinds[j], cost[j], ext[j])
            if key in seen:
                continue
            seen.add(key)
            c_old, e_old = cost[j], ext[j]
            c_new = c_old + T[i][j]
            e_new = e_old if e_old > E[i][j] else E[i][j]
            val = c_new + e_new
            m = val if val > cur_max else cur_max
            if m >= best[0]:
                continue
            cost[j], ext[j] = c_new, e_new
            cur[i] = j
            rec(pos + 1, m, total + (val - c_old - e_old))
            cost[j], ext[j] = c_old, e_old

    try:
        rec(0, 0.0, 0.0)
    except _Stop:
        plan = _finish(lengths, pipes, best[1], profile, False, "exact")
        raise BudgetExhausted(f"dispatch search stopped after {node_budget} nodes", incumbent=plan) from None
    return _finish(lengths, pipes, best[1], profile, True, "exact")


class _Stop(Exception):
    pass


def round_robin(lengths, strategy, profile) -> DispatchPlan:
    """Even round-robin over pipelines, skipping those a sequence does not fit."""
    lengths = list(lengths)
    pipes, horizon, _, _ = _prepare(lengths, strategy, profile)
    assign = []
    nxt = 0
    for i in range(len(lengths)):
        h = int(horizon[i])
        j = nxt % len(pipes)
        if j >= h:
            j = nxt % h
        assign.append(j)
        nxt += 1
    return _finish(lengths, pipes, assign, profile, False, "round-robin")


def refine_balance(lengths, plan: DispatchPlan, profile, max_moves: int | None = None) -> DispatchPlan:
    """Even out pipeline bounds without ever raising the largest one.

    A sequence moves from pipeline ``p`` to ``q`` only when ``q``'s new bound
    stays strictly below ``p``'s old one, so every move shrinks the sorted
    bound vector lexicographically and the loop terminates.
    """
    lengths = list(lengths)
    pipes = list(plan.pipelines)
    if len(pipes) < 2 or not lengths:
        return plan
    caps = [profile.max_len_of(p) for p in pipes]
    groups = plan.groups(lengths)
    members = [sorted(g, key=lambda i: (-lengths[i], i)) for g in groups]
    bound = [lower_bound([lengths[i] for i in g], p, profile) for g, p in zip(members, pipes)]
    limit = max_moves if max_moves is not None else 20 * len(lengths)
    moves = 0
    while moves < limit:
        moved = False
        for p in sorted(range(len(pipes)), key=lambda j: (-bound[j], j)):
            for i in list(members[p]):
                rest = [lengths[k] for k in members[p] if k != i]
                src_after = lower_bound(rest, pipes[p], profile)
                best_q, best_val = None, bound[p]
                for q in range(len(pipes)):
                    if q == p or lengths[i] > caps[q]:
                        continue
                    val = lower_bound([lengths[k] for k in members[q]] + [lengths[i]], pipes[q], profile)
                    if val < best_val:
                        best_q, best_val = q, val
                if best_q is None:
                    continue
                members[p].remove(i)
                members[best_q].append(i)
                members[best_q].sort(key=lambda k: (-lengths[k], k))
                bound[p], bound[best_q] = src_after, best_val
                moves += 1
                moved = True
                break
            if moved:
                break
        if not moved:
            break
    assign = [0] * len(lengths)
    for j, g in enumerate(members):
        for i in g:
            assign[i] = j
    if tuple(assign) == plan.assignment:
        return plan
    refined = _finish(lengths, pipes, assign, profile, plan.optimal, plan.method + "+refine")
    if refined.objective > plan.objective:
        return plan
    return refined
