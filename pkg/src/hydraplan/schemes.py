"""Parallel schemes ``<TP,PP,CP>`` and strategies built as counted mixtures of them."""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True, order=True)
class ParallelScheme:
    tp: int
    pp: int
    cp: int

    def __post_init__(self):
        for name in ("tp", "pp", "cp"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")

    @property
    def gpus(self) -> int:
        return self.tp * self.pp * self.cp

    def __str__(self):
        return f"{self.tp}x{self.pp}x{self.cp}"

    @classmethod
    def parse(cls, text: str) -> "ParallelScheme":
        m = re.fullmatch(r"\s*(\d+)x(\d+)x(\d+)\s*", text)
        if not m:
            raise ValidationError(f"bad scheme text {text!r}; expected TPxPPxCP")
        return cls(*(int(g) for g in m.groups()))


def gpus(scheme: ParallelScheme) -> int:
    return scheme.tp * scheme.pp * scheme.cp


@dataclass(frozen=True)
class Strategy:
    """``terms`` is a tuple of ``(scheme, count)``; pipeline order follows term order."""

    terms: tuple[tuple[ParallelScheme, int], ...]

    def __post_init__(self):
        if not self.terms:
            raise ValidationError("strategy needs at least one term")
        for scheme, count in self.terms:
            if count < 1:
                raise ValidationError(f"count for {scheme} must be >= 1")

    @classmethod
    def homogeneous(cls, scheme: ParallelScheme, count: int) -> "Strategy":
        return cls(((scheme, count),))

    @classmethod
    def from_counts(cls, counts: dict) -> "Strategy":
        return cls(tuple((s, c) for s, c in counts.items() if c > 0))

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        terms = []
        for part in text.split("+"):
            part = part.strip()
            if "*" in part:
                s, c = part.split("*")
                terms.append((ParallelScheme.parse(s), int(c)))
            else:
                terms.append((ParallelScheme.parse(part), 1))
        return cls(tuple(terms))

    def __str__(self):
        return "+".join(f"{s}*{c}" for s, c in self.terms)

    @property
    def total_gpus(self) -> int:
        return sum(s.gpus * c for s, c in self.terms)

    @property
    def num_pipelines(self) -> int:
        return sum(c for _, c in self.terms)

    @property
    def cp_replicas(self) -> int:
        """Pipelines weighted by context-parallel degree (gradient replica count)."""
        return sum(c * s.cp for s, c in self.terms)

    @property
    def tp_max(self) -> int:
        return max(s.tp for s, _ in self.terms)

    @property
    def schemes(self) -> tuple[ParallelScheme, ...]:
        return tuple(s for s, _ in self.terms)

    def pipelines(self) -> list[ParallelScheme]:
        out = []
        for s, c in self.terms:
            out.extend([s] * c)
        return out

    def is_homogeneous(self) -> bool:
        return len({s for s, _ in self.terms}) == 1

    def canonical(self) -> "Strategy":
        merged: dict[ParallelScheme, int] = {}
        for s, c in self.terms:
            merged[s] = merged.get(s, 0) + c
        return Strategy(tuple(sorted(merged.items(), key=lambda sc: (-sc[0].gpus, sc[0]))))

    def sorted_by(self, key) -> "Strategy":
        """Terms reordered by ``key(scheme)`` descending; stable for ties."""
        return Strategy(tuple(sorted(self.terms, key=lambda sc: -key(sc[0]))))


def enumerate_schemes(n_gpus, n_layers, tp_domain=None, pp_domain=None, cp_domain=None):
    """All ``<tp,pp,cp>`` with ``tp*pp*cp <= n_gpus`` and ``pp | n_layers``, tp-major order."""
    if n_gpus < 1 or n_layers < 1:
        raise ValidationError("n_gpus and n_layers must be positive")
    pow2 = [1 << i for i in range(n_gpus.bit_length()) if (1 << i) <= n_gpus]
    tp_domain = sorted(set(tp_domain or pow2))
    cp_domain = sorted(set(cp_domain or pow2))
    if pp_domain is None:
        pp_domain = [d for d in range(1, n_layers + 1) if n_layers % d == 0]
    pp_domain = sorted({p for p in pp_domain if n_layers % p == 0})
    for dom, name in ((tp_domain, "tp"), (pp_domain, "pp"), (cp_domain, "cp")):
        if not dom:
            raise ValidationError(f"{name} domain is empty")
        if min(dom) < 1:
            raise ValidationError(f"{name} domain must be positive")
    out = [
        ParallelScheme(tp, pp, cp)
        for tp, pp, cp in itertools.product(tp_domain, pp_domain, cp_domain)
        if tp * pp * cp <= n_gpus
    ]
    if not out:
        raise ValidationError("no valid parallel scheme for the given domains")
    return out


def validate_strategy(strategy: Strategy, n_gpus: int, n_layers: int | None = None) -> list[str]:
    """Return every violation found; an empty list means the strategy is valid."""
    problems = []
    total = strategy.total_gpus
    if total > n_gpus:
        problems.append(f"uses {total} GPUs > {n_gpus} available")
    for scheme, count in strategy.terms:
        if count < 1:
            problems.append(f"{scheme}: count {count} < 1")
        if scheme.gpus > n_gpus:
            problems.append(f"{scheme}: needs {scheme.gpus} GPUs > {n_gpus}")
        if n_layers is not None and n_layers % scheme.pp:
            problems.append(f"{scheme}: pp={scheme.pp} does not divide {n_layers} layers")
    return problems


def enumerate_strategies(n_gpus: int, schemes) -> list[Strategy]:
    """Every multiset of ``schemes`` using exactly ``n_gpus`` GPUs, in canonical form."""
    schemes = sorted(set(schemes), key=lambda s: (-s.gpus, s))
    out = []

    def rec(i, left, terms):
        if left == 0:
            out.append(Strategy(tuple(terms)))
            return
        if i == len(schemes):
            return
        s = schemes[i]
        for count in range(left // s.gpus, -1, -1):
            if count:
                terms.append((s, count))
            rec(i + 1, left - count * s.gpus, terms)
            if count:
                terms.pop()

    rec(0, n_gpus, [])
    return out
