"""Offline candidate proposal from a length histogram.

``t[n][l]`` is the best achievable time for serving every sequence no longer
than ``l`` with ``n`` GPUs: the length axis is cut into intervals, each served
by ``d`` pipelines of one scheme that split the interval's cost evenly.  With
fractional steps ``n`` and ``d`` move on a decimal grid stored as scaled
integers, and the fractional optimum is then rounded to integer strategies.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numba import njit

from .errors import InfeasibleError, ValidationError
from .schemes import ParallelScheme, Strategy, validate_strategy

CANDIDATE_SCHEMA = "hydraplan.candidates/1"
DEFAULT_CAP = 16


@dataclass(frozen=True)
class DPSteps:
    n_step: Fraction = Fraction(1, 10)
    d_step: Fraction = Fraction(1, 10)
    l_step: int = 128

    def __post_init__(self):
        object.__setattr__(self, "n_step", Fraction(str(self.n_step)))
        object.__setattr__(self, "d_step", Fraction(str(self.d_step)))
        for name in ("n_step", "d_step"):
            step = getattr(self, name)
            if step <= 0 or (1 / step).denominator != 1:
                raise ValidationError(f"{name} must be 1/k for a positive integer k")
        if self.l_step < 1:
            raise ValidationError("l_step must be >= 1")

    @property
    def n_scale(self) -> int:
        return int(1 / self.n_step)

    @property
    def d_scale(self) -> int:
        return int(1 / self.d_step)


INTEGER_STEPS = DPSteps(1, 1, 128)


@dataclass(frozen=True)
class Interval:
    lo: int  # grid index, exclusive
    hi: int  # grid index, inclusive
    scheme: ParallelScheme
    d: Fraction


@dataclass
class DPTable:
    t: np.ndarray  # (n units + 1, grid points + 1)
    choice: np.ndarray  # (k, q, w) per state; k = -1 means "one n-step fewer"
    schemes: list
    steps: DPSteps
    prefix: np.ndarray  # (K, grid points + 1) cumulative interval cost
    maxg: np.ndarray  # last grid index each scheme can hold
    n_gpus: int

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.t.shape[1]) * self.steps.l_step

    def _index(self, n, l):
        m = Fraction(n) * self.steps.n_scale
        if m.denominator != 1 or l % self.steps.l_step:
            raise ValidationError(f"({n}, {l}) is not on the table grid")
        return int(m), l // self.steps.l_step

    def value(self, n, l) -> float:
        m, g = self._index(n, l)
        return float(self.t[m, g])

    def solution(self, n, l) -> list[Interval]:
        m, g = self._index(n, l)
        if math.isinf(self.t[m, g]):
            return []
        out = []
        gpu_units = _gpu_units(self.schemes, self.steps)
        while g > 0:
            k, q, w = (int(x) for x in self.choice[m, g])
            if k < 0:
                m -= 1
                continue
            out.append(Interval(g - w, g, self.schemes[k], Fraction(q, self.steps.d_scale)))
            m -= q * gpu_units[k]
            g -= w
        return out[::-1]

    def score(self, intervals) -> float:
        """Re-evaluate a solution's time from the interval costs alone."""
        idx = {s: i for i, s in enumerate(self.schemes)}
        best = 0.0
        for iv in intervals:
            c = self.prefix[idx[iv.scheme], iv.hi] - self.prefix[idx[iv.scheme], iv.lo]
            q = int(iv.d * self.steps.d_scale)
            best = max(best, c / (q / self.steps.d_scale))
        return float(best)


def fractional_counts(intervals) -> dict:
    counts: dict = {}
    for iv in intervals:
        counts[iv.scheme] = counts.get(iv.scheme, 0) + iv.d
    return counts


def format_counts(counts) -> str:
    return "+".join(f"{s}*{_num(c)}" for s, c in counts.items())


def _num(c: Fraction) -> str:
    return str(c.numerator) if c.denominator == 1 else f"{float(c):g}"


def _gpu_units(schemes, steps):
    out = []
    for s in schemes:
        u = Fraction(s.gpus * steps.n_scale, steps.d_scale)
        if u.denominator != 1:
            raise ValidationError(f"d_step {steps.d_step} is finer than n_step {steps.n_step} allows for {s}")
        out.append(int(u))
    return np.asarray(out, dtype=np.int64)


def interval_prefix(histogram, schemes, profile, l_step, l_max) -> np.ndarray:
    """Cumulative cost of all sequences up to each grid point, per scheme (bin midpoints)."""
    w = histogram.bin_width
    if l_step % w:
        raise ValidationError(f"histogram bin width {w} must divide l_step {l_step}")
    if l_max % l_step:
        raise ValidationError(f"l_max {l_max} must be a multiple of l_step {l_step}")
    n_bins = l_max // w
    counts = np.zeros(n_bins)
    have = min(n_bins, len(histogram.counts))
    counts[:have] = histogram.counts[:have]
    mids = np.arange(n_bins) * w + (w + 1) / 2.0
    per = l_step // w
    out = np.zeros((len(schemes), l_max // l_step + 1))
    for k, s in enumerate(schemes):
        cell = (counts * profile.coeffs_for(s)(mids)).reshape(-1, per).sum(axis=1)
        out[k, 1:] = np.cumsum(cell)
    return out


@njit(cache=True)
def _dp_kernel(pref, gpu_units, maxg, M, G, d_scale):
    K = pref.shape[0]
    t = np.full((M + 1, G + 1), np.inf)
    t[:, 0] = 0.0
    choice = np.full((M + 1, G + 1, 3), -1, dtype=np.int64)
    for m in range(1, M + 1):
        for g in range(1, G + 1):
            best = t[m - 1, g]
            bk, bq, bw = -1, 0, 0
            for k in range(K):
                if maxg[k] < g:
                    continue
                c = gpu_units[k]
                qmax = m // c
                if qmax == 0:
                    continue
                for w in range(1, g + 1):
                    C = pref[k, g] - pref[k, g - w]
                    # t[m - q c] rises with q while C / d falls: find the crossing
                    lo, hi = 1, qmax + 1
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if t[m - mid * c, g - w] >= C / (mid / d_scale):
                            hi = mid
                        else:
                            lo = mid + 1
                    if lo <= qmax:
                        v = t[m - lo * c, g - w]
                        q = lo
                        if lo > 1:
                            v2 = C / ((lo - 1) / d_scale)
                            if v2 <= v:
                                v = v2
                                q = lo - 1
                    else:
                        q = qmax
                        v = C / (qmax / d_scale)
                    if v < best:
                        best = v
                        bk, bq, bw = k, q, w
            t[m, g] = best
            choice[m, g, 0] = bk
            choice[m, g, 1] = bq
            choice[m, g, 2] = bw
    return t, choice


def dp_solve(histogram, n_gpus, l_max, schemes, profile, steps: DPSteps = DPSteps()) -> DPTable:
    schemes = [s for s in schemes if s.gpus <= n_gpus]
    if not schemes:
        raise ValidationError("no scheme fits the GPU budget")
    pref = interval_prefix(histogram, schemes, profile, steps.l_step, l_max)
    maxg = np.asarray([profile.max_len_of(s) // steps.l_step for s in schemes], dtype=np.int64)
    M = n_gpus * steps.n_scale
    G = l_max // steps.l_step
    t, choice = _dp_kernel(pref, _gpu_units(schemes, steps), maxg, M, G, float(steps.d_scale))
    return DPTable(t, choice, schemes, steps, pref, maxg, n_gpus)


@njit(cache=True)
def _count_kernel(pref, counts, radix, maxg, G):
    S = pref.shape[0]
    R = radix[S - 1] * (counts[S - 1] + 1)
    f = np.full((G + 1, R), np.inf)
    f[0, :] = 0.0
    for g in range(1, G + 1):
        for r in range(R):
            best = np.inf
            for k in range(S):
                rem = (r // radix[k]) % (counts[k] + 1)
                if rem == 0 or maxg[k] < g:
                    continue
                for w in range(1, g + 1):
                    C = pref[k, g] - pref[k, g - w]
                    lo, hi = 1, rem + 1
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if f[g - w, r - mid * radix[k]] >= C / mid:
                            hi = mid
                        else:
                            lo = mid + 1
                    if lo <= rem:
                        v = f[g - w, r - lo * radix[k]]
                        if lo > 1:
                            v2 = C / (lo - 1)
                            if v2 < v:
                                v = v2
                    else:
                        v = C / rem
                    if v < best:
                        best = v
            f[g, r] = best
    return f[:, R - 1]


def candidate_objective(strategy: Strategy, table: DPTable) -> np.ndarray:
    """Best time per grid point when only ``strategy``'s pipelines may serve the intervals."""
    counts = strategy.canonical()
    idx = {s: i for i, s in enumerate(table.schemes)}
    missing = [str(s) for s, _ in counts.terms if s not in idx]
    if missing:
        raise ValidationError(f"schemes {missing} are not in the table")
    pref = np.stack([table.prefix[idx[s]] for s, _ in counts.terms])
    cnt = np.asarray([c for _, c in counts.terms], dtype=np.int64)
    radix = np.ones(len(cnt), dtype=np.int64)
    for k in range(1, len(cnt)):
        radix[k] = radix[k - 1] * (cnt[k - 1] + 1)
    maxg = np.asarray([table.maxg[idx[s]] for s, _ in counts.terms], dtype=np.int64)
    return _count_kernel(pref, cnt, radix, maxg, table.t.shape[1] - 1)


@dataclass
class CandidateSet:
    strategies: list
    provenance: list = field(default_factory=list)
    table: DPTable | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.strategies)

    def to_dict(self) -> dict:
        return {
            "schema_version": CANDIDATE_SCHEMA,
            "candidates": [
                {"strategy": str(s), **p} for s, p in zip(self.strategies, self.provenance)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, n_gpus: int | None = None) -> "CandidateSet":
        if d.get("schema_version") != CANDIDATE_SCHEMA:
            raise ValidationError(f"unsupported candidate schema {d.get('schema_version')!r}")
        strategies, prov = [], []
        for row in d["candidates"]:
            s = Strategy.parse(row["strategy"])
            if n_gpus is not None:
                problems = validate_strategy(s, n_gpus)
                if problems:
                    raise ValidationError(f"candidate {s}: " + "; ".join(problems))
            strategies.append(s)
            prov.append({k: v for k, v in row.items() if k != "strategy"})
        return cls(strategies, prov)


def round_counts(counts: dict, n_gpus: int):
    """Every floor/ceil combination of the counts that fits in ``n_gpus``, zero terms dropped."""
    options = []
    for s, c in counts.items():
        lo, hi = math.floor(c), math.ceil(c)
        options.append([(s, x) for x in sorted({lo, hi})])
    out = []
    for combo in itertools.product(*options):
        terms = {s: x for s, x in combo if x > 0}
        if not terms:
            continue
        strat = Strategy.from_counts(terms).canonical()
        if strat.total_gpus <= n_gpus:
            out.append(strat)
    return out


def best_homogeneous(histogram, n_gpus, l_max, schemes, profile, l_step=128):
    """Cheapest single-scheme strategy able to hold ``l_max`` tokens."""
    best = None
    for s in schemes:
        if s.gpus > n_gpus or profile.max_len_of(s) < l_max:
            continue
        count = n_gpus // s.gpus
        pref = interval_prefix(histogram, [s], profile, l_step, l_max)
        key = (pref[0, -1] / count, s.gpus * count * -1, str(s))
        if best is None or key < best[0]:
            best = (key, Strategy.homogeneous(s, count))
    if best is None:
        raise InfeasibleError(f"no scheme supports l_max={l_max}")
    return best[1]


def propose(histogram, n_gpus, l_max, schemes, profile, steps: DPSteps = DPSteps(), cap: int = DEFAULT_CAP):
    schemes = [s for s in schemes if s.gpus <= n_gpus and profile.max_len_of(s) > 0]
    safety = best_homogeneous(histogram, n_gpus, l_max, schemes, profile, steps.l_step)
    table = dp_solve(histogram, n_gpus, l_max, schemes, profile, steps)
    m_full = n_gpus * steps.n_scale
    found: dict = {}
    for g in range(1, table.t.shape[1]):
        # no mass up to this ceiling, or unreachable: nothing to propose from
        if math.isinf(table.t[m_full, g]) or table.t[m_full, g] == 0:
            continue
        sol = table.solution(n_gpus, g * steps.l_step)
        counts = fractional_counts(sol)
        for strat in round_counts(counts, n_gpus):
            if max(profile.max_len_of(s) for s in strat.schemes) < g * steps.l_step:
                continue
            key = str(strat)
            if key not in found:
                found[key] = (strat, {"L": g * steps.l_step, "fractional": format_counts(counts),
                                      "t": float(table.t[m_full, g])})
    rows = []
    for key, (strat, prov) in found.items():
        g = prov["L"] // steps.l_step
        t_int = float(candidate_objective(strat, table)[g])
        ratio = t_int / prov["t"] if prov["t"] > 0 else 1.0
        rows.append((ratio, -prov["L"], key, strat, {**prov, "t_int": t_int}))
    rows.sort(key=lambda r: r[:3])
    safety_key = str(safety.canonical())
    kept = [r for r in rows if r[2] != safety_key][: max(cap - 1, 0)]
    t_safety = float(candidate_objective(safety.canonical(), table)[-1])
    kept.append((0, 0, safety_key, safety.canonical(),
                 {"L": l_max, "fractional": "homogeneous", "t": t_safety, "t_int": t_safety, "safety": True}))
    kept.sort(key=lambda r: r[2])
    return CandidateSet([r[3] for r in kept], [r[4] for r in kept], table)
