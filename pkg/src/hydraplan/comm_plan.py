"""Parameter pull and gradient push plans between the sharded and propagation layouts.

The parameter space is a grid: layer blocks along one axis, the tensor-parallel
coordinate ``x`` in ``[0, 1)`` along the other.  A propagation GPU needs the
rectangle ``stage layers x [r/tp, (r+1)/tp)``.  In the optimization layout each
GPU owns one rectangle of size ``W/N``, laid out after a homogeneous reference
strategy: GPU ``g`` owns the ``q``-th of the equal ``x`` pieces of its reference
(stage, tp-rank) rectangle, ``q`` being its replica index.  Walking GPUs in rank
order walks these chunks, so rank ``g`` owns ``[g/N, (g+1)/N)`` of the flattened
space.

Mutual slices are cells ``(block, segment)`` with ``segment`` counting
``granularity`` equal pieces of each block's ``x`` range.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction

from .cost_model import overlap_threshold
from .errors import ValidationError
from .schemes import ParallelScheme, Strategy, validate_strategy

COMM_SCHEMA = "hydraplan.commplan/1"


def mutual_granularity(*granularities: int) -> int:
    """Finest common slicing of layouts cut into the given equal-piece counts."""
    return math.lcm(*granularities)


@dataclass(frozen=True)
class Role:
    pipeline: int
    stage: int
    tp_rank: int
    cp_rank: int
    scheme: ParallelScheme


Rect = tuple  # (layer_lo, layer_hi, x_lo, x_hi) as Fractions of [0, 1)


@dataclass(frozen=True)
class PlacementMap:
    strategy: Strategy
    reference: Strategy
    n_gpus: int
    n_layers: int
    roles: tuple  # Role per GPU rank
    needed: tuple  # Rect per GPU rank
    owned: tuple  # Rect per GPU rank
    optimization: tuple  # flat [lo, hi) interval per GPU rank

    @property
    def layer_blocks(self) -> int:
        return math.lcm(*(s.pp for s in self.strategy.schemes), *(s.pp for s in self.reference.schemes))

    def slices_of(self, rect, granularity):
        blocks = self.layer_blocks
        l0, l1, x0, x1 = rect
        b0, b1 = l0 * blocks, l1 * blocks
        s0, s1 = x0 * granularity, x1 * granularity
        if any(v.denominator != 1 for v in (b0, b1, s0, s1)):
            raise ValidationError(f"region {rect} is not aligned to granularity {granularity}")
        return [(b, s) for b in range(int(b0), int(b1)) for s in range(int(s0), int(s1))]

    def owner_table(self, granularity):
        owner = {}
        for g, rect in enumerate(self.owned):
            for sl in self.slices_of(rect, granularity):
                owner[sl] = g
        return owner


def _roles(strategy):
    roles = []
    for p, scheme in enumerate(strategy.pipelines()):
        for s in range(scheme.pp):
            for r in range(scheme.tp):
                for c in range(scheme.cp):
                    roles.append(Role(p, s, r, c, scheme))
    return roles


def _need(role):
    s = role.scheme
    return (Fraction(role.stage, s.pp), Fraction(role.stage + 1, s.pp),
            Fraction(role.tp_rank, s.tp), Fraction(role.tp_rank + 1, s.tp))


def build_placement(strategy: Strategy, n_gpus: int, n_layers: int, reference: Strategy | None = None,
                    allow_idle: bool = False) -> PlacementMap:
    """Propagation and optimization layouts of ``strategy`` on ``n_gpus`` ranks.

    With ``allow_idle`` a strategy may leave trailing ranks without a
    propagation role; they still own their optimization shard.
    """
    problems = validate_strategy(strategy, n_gpus, n_layers)
    if strategy.total_gpus != n_gpus and not allow_idle:
        problems.append(f"uses {strategy.total_gpus} of {n_gpus} GPUs; every GPU needs a propagation role")
    if problems:
        raise ValidationError(f"{strategy}: " + "; ".join(problems))
    if reference is None:
        reference = strategy if strategy.is_homogeneous() else Strategy.homogeneous(ParallelScheme(1, 1, 1), n_gpus)
    if not reference.is_homogeneous() or reference.total_gpus != n_gpus or n_layers % reference.schemes[0].pp:
        raise ValidationError(f"reference {reference} must be homogeneous over {n_gpus} GPUs")
    roles = _roles(strategy)
    ref_roles = _roles(reference)
    ref = reference.schemes[0]
    group = reference.num_pipelines * ref.cp
    owned = []
    for role in ref_roles:
        l0, l1, x0, x1 = _need(role)
        q = role.pipeline * ref.cp + role.cp_rank
        width = (x1 - x0) / group
        owned.append((l0, l1, x0 + q * width, x0 + (q + 1) * width))
    flat = tuple((Fraction(g, n_gpus), Fraction(g + 1, n_gpus)) for g in range(n_gpus))
    needed = [_need(r) for r in roles]
    idle = n_gpus - len(roles)
    nothing = (Fraction(0), Fraction(0), Fraction(0), Fraction(0))
    return PlacementMap(strategy, reference, n_gpus, n_layers, tuple(roles) + (None,) * idle,
                        tuple(needed) + (nothing,) * idle, tuple(owned), flat)


@dataclass(frozen=True, order=True)
class Primitive:
    op: str  # "send" | "receive" | "local_move"
    a: int  # send: src, receive: dst, local_move: gpu
    b: int  # send: dst, receive: src, local_move: same gpu
    slice: tuple

    def to_list(self):
        return [self.op, self.a, self.b, list(self.slice)]


@dataclass(frozen=True)
class ReduceScatterGroup:
    members: tuple
    assignment: tuple  # (member, slices) pairs

    def to_dict(self):
        return {"members": list(self.members),
                "assignment": [[m, [list(s) for s in sl]] for m, sl in self.assignment]}


@dataclass
class CommPlan:
    direction: str
    strategy: Strategy
    n_gpus: int
    granularity: int
    layer_blocks: int
    primitives: list
    reduce_scatter_groups: list = field(default_factory=list)
    # per-GPU gross units: slices handed over including local ones
    gross: dict = field(default_factory=dict)

    @property
    def slice_count(self) -> int:
        return self.granularity * self.layer_blocks

    def deliveries(self):
        """Destination GPU -> list of (slice, source) pairs."""
        out = defaultdict(list)
        for p in self.primitives:
            if p.op == "receive":
                out[p.a].append((p.slice, p.b))
            elif p.op == "local_move":
                out[p.a].append((p.slice, p.a))
        return out

    def to_dict(self, param_bytes=None) -> dict:
        d = {
            "schema_version": COMM_SCHEMA,
            "direction": self.direction,
            "strategy": str(self.strategy),
            "n_gpus": self.n_gpus,
            "granularity": self.granularity,
            "layer_blocks": self.layer_blocks,
            "classification": reduce_to_collectives(self),
            "primitives": [p.to_list() for p in self.primitives],
            "reduce_scatter_groups": [g.to_dict() for g in self.reduce_scatter_groups],
        }
        if param_bytes is not None:
            d["per_gpu_volume"] = {str(g): v for g, v in volumes(self, param_bytes).items()}
        return d

    def to_dot(self) -> str:
        edges = defaultdict(int)
        for p in self.primitives:
            if p.op == "send":
                edges[(p.a, p.b)] += 1
            elif p.op == "local_move":
                edges[(p.a, p.a)] += 1
        lines = [f'digraph {self.direction} {{']
        for g in range(self.n_gpus):
            lines.append(f'  g{g} [label="GPU {g}"];')
        for (a, b), n in sorted(edges.items()):
            style = ' style=dashed' if a == b else ''
            lines.append(f'  g{a} -> g{b} [label="{n}"{style}];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _lnk(src, dst, sl, out):
    if src == dst:
        out.append(Primitive("local_move", dst, dst, sl))
    else:
        out.append(Primitive("send", src, dst, sl))
        out.append(Primitive("receive", dst, src, sl))


def pull_plan(placement: PlacementMap, strategy: Strategy | None = None) -> CommPlan:
    strategy = strategy or placement.strategy
    if strategy != placement.strategy:
        raise ValidationError("placement was built for a different strategy")
    gran = mutual_granularity(placement.n_gpus, strategy.tp_max)
    owner = placement.owner_table(gran)
    prims = []
    requesters = defaultdict(int)
    received = defaultdict(int)
    for g, rect in enumerate(placement.needed):
        for sl in placement.slices_of(rect, gran):
            _lnk(owner[sl], g, sl, prims)
            requesters[owner[sl]] += 1
            received[g] += 1
    gross = {g: (requesters[g], received[g]) for g in range(placement.n_gpus)}
    return CommPlan("pull", strategy, placement.n_gpus, gran, placement.layer_blocks, sorted(prims), [], gross)


def push_plan(placement: PlacementMap, strategy: Strategy | None = None) -> CommPlan:
    strategy = strategy or placement.strategy
    if strategy != placement.strategy:
        raise ValidationError("placement was built for a different strategy")
    gran = mutual_granularity(placement.n_gpus, strategy.cp_replicas * strategy.tp_max)
    owner = placement.owner_table(gran)
    holders = defaultdict(list)
    for g, rect in enumerate(placement.needed):
        for sl in placement.slices_of(rect, gran):
            holders[sl].append(g)
    by_group = defaultdict(list)
    for sl in sorted(holders):
        by_group[tuple(holders[sl])].append(sl)
    prims, groups = [], []
    contributed = defaultdict(int)
    absorbed = defaultdict(int)
    for members, slices in sorted(by_group.items()):
        quota, rem = divmod(len(slices), len(members))
        if rem:
            raise ValidationError(f"{len(slices)} slices do not split evenly over replica group {members}")
        held = {m: [] for m in members}
        spill = []
        # reduced slices stay with their owner whenever the owner is a member
        for sl in slices:
            o = owner[sl]
            if o in held and len(held[o]) < quota:
                held[o].append(sl)
            else:
                spill.append(sl)
        for m in members:
            while len(held[m]) < quota:
                held[m].append(spill.pop(0))
        groups.append(ReduceScatterGroup(members, tuple((m, tuple(held[m])) for m in members)))
        for m in members:
            contributed[m] += len(slices)
            for sl in held[m]:
                _lnk(m, owner[sl], sl, prims)
        for sl in slices:
            absorbed[owner[sl]] += len(members)
    gross = {g: (contributed[g], absorbed[g]) for g in range(placement.n_gpus)}
    return CommPlan("push", strategy, placement.n_gpus, gran, placement.layer_blocks, sorted(prims), groups, gross)


def volumes(plan: CommPlan, param_bytes: float) -> dict:
    """Per-GPU volumes in bytes.

    ``sent``/``received`` count every slice handed over, local ones included:
    for pull an owner sends its data once per requester and a GPU receives its
    whole need; for push a GPU contributes its whole gradient and an owner
    absorbs one copy per contributor.  ``net_sent``/``net_received`` count only
    traffic that crosses GPUs, with a ring reduce-scatter inside each group.
    """
    unit = param_bytes / plan.slice_count
    net_s = defaultdict(float)
    net_r = defaultdict(float)
    for p in plan.primitives:
        if p.op == "send":
            net_s[p.a] += unit
        elif p.op == "receive":
            net_r[p.a] += unit
    for grp in plan.reduce_scatter_groups:
        k = len(grp.members)
        size = sum(len(sl) for _, sl in grp.assignment) * unit
        for m in grp.members:
            net_s[m] += size * (k - 1) / k
            net_r[m] += size * (k - 1) / k
    out = {}
    for g in range(plan.n_gpus):
        s, r = plan.gross.get(g, (0, 0))
        out[g] = {"sent": s * unit, "received": r * unit, "net_sent": net_s[g], "net_received": net_r[g]}
    return out


def reduce_to_collectives(plan: CommPlan) -> str:
    if plan.direction == "push":
        if any(p.op != "local_move" for p in plan.primitives):
            return "general"
        return "reduce_scatter"
    deliveries = plan.deliveries()
    groups = defaultdict(list)
    for g in range(plan.n_gpus):
        needed = frozenset(sl for sl, _ in deliveries.get(g, []))
        groups[needed].append(g)
    for needed, members in groups.items():
        sources = {src for g in members for _, src in deliveries.get(g, [])}
        if sources != set(members):
            return "general"
    return "all_gather"


def audit(plan: CommPlan, placement: PlacementMap) -> list[str]:
    """Conservation, pairing and granularity checks; empty means clean."""
    problems = []
    n = plan.n_gpus
    if plan.direction == "pull":
        want_gran = mutual_granularity(n, plan.strategy.tp_max)
        want = {g: set(placement.slices_of(placement.needed[g], plan.granularity)) for g in range(n)}
    else:
        want_gran = mutual_granularity(n, plan.strategy.cp_replicas * plan.strategy.tp_max)
        want = {g: set(placement.slices_of(placement.owned[g], plan.granularity)) for g in range(n)}
    if plan.granularity != want_gran:
        problems.append(f"granularity {plan.granularity} != {want_gran}")
    got = defaultdict(list)
    for dst, items in plan.deliveries().items():
        got[dst].extend(sl for sl, _ in items)
    for g in range(n):
        if len(got[g]) != len(set(got[g])):
            problems.append(f"GPU {g} receives a slice more than once")
        if set(got[g]) != want[g]:
            problems.append(f"GPU {g} delivered set differs from its need")
    sends = sorted((p.a, p.b, p.slice) for p in plan.primitives if p.op == "send")
    recvs = sorted((p.b, p.a, p.slice) for p in plan.primitives if p.op == "receive")
    if sends != recvs:
        problems.append("send and receive primitives do not pair up")
    return problems


def overlap_feasible(scheme, tokens_per_microbatch, profile) -> bool:
    return tokens_per_microbatch >= overlap_threshold(scheme, profile)
