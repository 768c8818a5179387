"""Latency and memory cost models per parallel scheme.

Latency of one pipeline stage (forward + backward) for a sequence of ``l``
tokens is ``a*l**2 + b*l + c``.  Memory grows linearly in ``l``; the largest
``l`` that fits is the scheme's ``max_len``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from fractions import Fraction

import numpy as np
from scipy.optimize import nnls

from .errors import InfeasibleError, UnknownSchemeError, ValidationError
from .schemes import ParallelScheme

PROFILE_SCHEMA = "hydraplan.profile/1"


@dataclass(frozen=True)
class ModelShape:
    hidden: int
    layers: int
    vocab: int

    def __post_init__(self):
        if min(self.hidden, self.layers, self.vocab) < 1:
            raise ValidationError("model shape entries must be positive")

    @property
    def params(self) -> float:
        return 12.0 * self.layers * self.hidden**2 + self.hidden * self.vocab


@dataclass(frozen=True)
class HardwareSpec:
    n_gpus: int
    gpu_memory: float
    flops: float
    bandwidth: float
    safety_margin: float = 0.0

    def __post_init__(self):
        if self.n_gpus < 1 or self.gpu_memory <= 0 or self.flops <= 0 or self.bandwidth <= 0:
            raise ValidationError("hardware entries must be positive")
        if not 0 <= self.safety_margin < self.gpu_memory:
            raise ValidationError("safety_margin must lie in [0, gpu_memory)")


@dataclass(frozen=True)
class MemoryConstants:
    act_const: float = 40.0
    state_const: float = 192.0
    alpha: float = 0.75
    embed_factor: float = 2.0

    def __post_init__(self):
        if self.act_const <= 0 or self.state_const <= 0:
            raise ValidationError("memory constants must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must be in [0, 1]")


@dataclass(frozen=True)
class LatencyCoeffs:
    a: float
    b: float
    c: float

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or self.c < 0:
            raise ValidationError(f"latency coefficients must be non-negative, got {self}")

    def __call__(self, l):
        if isinstance(l, np.ndarray):
            return (self.a * l + self.b) * l + self.c
        return self.a * l * l + self.b * l + self.c

    def as_tuple(self):
        return (self.a, self.b, self.c)


@dataclass(frozen=True)
class FitReport:
    coeffs: LatencyCoeffs
    residuals: tuple[float, ...]
    rmse: float
    max_rel_error: float


def fit_latency(samples) -> FitReport:
    """Non-negative least squares on the basis ``(l^2, l, 1)``, residuals relative to ``t``."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError("samples must be a sequence of (length, seconds) pairs")
    l, t = arr[:, 0], arr[:, 1]
    if len(np.unique(l)) < 3:
        raise ValidationError("need at least 3 distinct lengths to fit a quadratic")
    X = np.column_stack([l * l, l, np.ones_like(l)])
    # relative residuals: profiling noise is multiplicative, and short lengths
    # would otherwise be drowned out by the quadratic tail
    unit = float(np.abs(t).max()) or 1.0
    tn = t / unit
    w = 1.0 / np.maximum(np.abs(tn), 1e-12)
    Xw, tw = X * w[:, None], tn * w
    # column scaling keeps the solver well conditioned across 1e9 dynamic range
    scale = np.linalg.norm(Xw, axis=0)
    scale[scale == 0] = 1.0
    Xs = Xw / scale
    sol, *_ = np.linalg.lstsq(Xs, tw, rcond=None)
    if np.any(sol < 0):
        sol, _ = nnls(Xs, tw)
    coef = np.maximum(sol / scale, 0.0) * unit
    coeffs = LatencyCoeffs(float(coef[0]), float(coef[1]), float(coef[2]))
    pred = coeffs(l)
    resid = t - pred
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(t != 0, np.abs(resid) / np.abs(t), 0.0)
    return FitReport(
        coeffs=coeffs,
        residuals=tuple(float(r) for r in resid),
        rmse=float(np.sqrt(np.mean(resid**2))),
        max_rel_error=float(rel.max()),
    )


def activation_bytes_per_token(scheme, shape, memory) -> Fraction:
    return Fraction(shape.layers * shape.hidden) * Fraction(memory.act_const) / (scheme.tp * scheme.cp)


def state_bytes(scheme, shape, hardware, memory) -> Fraction:
    H, L, V, N = shape.hidden, shape.layers, shape.vocab, hardware.n_gpus
    B = Fraction(memory.state_const)
    alpha = Fraction(memory.alpha)
    e = Fraction(memory.embed_factor)
    return (
        Fraction(L * H * H, N) * B * alpha
        + Fraction(L, scheme.pp) * Fraction(H * H, scheme.tp) * B * (1 - alpha)
        + Fraction(H * V, N) * e * alpha
        + Fraction(H * V, scheme.tp) * e * (1 - alpha)
    )


def max_len(scheme, profile) -> int:
    """Largest token count whose activation peak plus model states fit in memory."""
    hw = profile.hardware
    budget = Fraction(hw.gpu_memory) - Fraction(hw.safety_margin)
    free = budget - state_bytes(scheme, profile.shape, hw, profile.memory)
    if free <= 0:
        raise InfeasibleError(f"{scheme}: model states alone exceed the memory budget")
    n = math.floor(free / activation_bytes_per_token(scheme, profile.shape, profile.memory))
    if n < 1:
        raise InfeasibleError(f"{scheme}: not even one token fits")
    return n


def util_len(scheme, profile, threshold: float = 0.85) -> int:
    """Smallest length whose throughput ``l / T(l)`` reaches ``threshold`` of the best
    throughput attainable below ``max_len``."""
    if not 0 < threshold <= 1:
        raise ValidationError("threshold must be in (0, 1]")
    co = profile.coeffs_for(scheme)
    cap = profile.max_len_of(scheme)
    if cap < 1:
        raise InfeasibleError(f"{scheme} cannot hold a single token")
    return _util_len(co, cap, threshold)


def _util_len(co: LatencyCoeffs, cap: int, threshold: float) -> int:
    A, B, C = Fraction(co.a), Fraction(co.b), Fraction(co.c)

    # exact comparisons keep a threshold of 1 from hinging on rounding noise
    def eff(l):
        t = (A * l + B) * l + C
        return Fraction(l) / t if t > 0 else math.inf

    if co.a == 0 and co.c == 0:
        return 1
    # l/T(l) rises until l = sqrt(c/a) and falls afterwards
    ratio = co.c / co.a if co.a else math.inf
    peak = cap if ratio >= cap * cap else max(1, math.isqrt(int(ratio)))
    cands = [p for p in (peak - 1, peak, peak + 1) if 1 <= p <= cap]
    best = max(eff(p) for p in cands)
    target = Fraction(threshold) * best if best != math.inf else best
    lo, hi = 1, max(cands, key=eff)
    if eff(lo) >= target:
        return lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if eff(mid) >= target:
            hi = mid
        else:
            lo = mid
    if eff(hi) >= target and eff(hi - 1) < target:
        return hi
    return _util_len_scan(co, cap, threshold)


def _util_len_scan(co, cap, threshold):
    ls = np.arange(1, cap + 1, dtype=np.float64)
    t = co(ls)
    eff = np.divide(ls, t, out=np.full_like(ls, np.inf), where=t > 0)
    hit = np.flatnonzero(eff >= threshold * eff.max())
    return int(hit[0]) + 1 if hit.size else cap


def overlap_threshold(scheme, profile) -> int:
    """Tokens per micro-batch above which parameter traffic hides behind compute."""
    hw = profile.hardware
    return math.ceil(scheme.tp * scheme.cp * Fraction(hw.flops) / Fraction(hw.bandwidth))


def latency(l, scheme, profile) -> float:
    return profile.coeffs_for(scheme)(l)


@dataclass(frozen=True)
class RooflineParams:
    """Knobs of the synthetic ground-truth latency model used in place of profiling."""

    mfu: float = 0.45
    intra_bandwidth: float = 400e9
    gpus_per_node: int = 8
    tp_penalty: float = 0.08
    cp_penalty: float = 0.06
    attn_factor: float = 7.0
    launch_per_layer: float = 1.5e-3
    fixed_overhead: float = 2e-3


def roofline_coeffs(scheme, shape, hardware, params: RooflineParams = RooflineParams()) -> LatencyCoeffs:
    H = shape.hidden
    layers_here = shape.layers / scheme.pp
    tp, cp = scheme.tp, scheme.cp
    eff = params.mfu / (1 + params.tp_penalty * math.log2(tp) + params.cp_penalty * math.log2(cp))
    flops = hardware.flops * eff
    b = 72.0 * H * H * layers_here / (tp * cp * flops)
    a = params.attn_factor * H * layers_here / (tp * cp * flops)
    # tensor-parallel collectives on activations, 4 per layer, 2-byte elements
    if tp > 1:
        bw = params.intra_bandwidth if tp <= params.gpus_per_node else hardware.bandwidth
        b += 4 * 2 * (tp - 1) / tp * 2 * H * layers_here / (cp * bw)
    # context-parallel key/value ring exchange, assumed half hidden behind attention
    if cp > 1:
        bw = params.intra_bandwidth if tp * cp <= params.gpus_per_node else hardware.bandwidth
        b += 0.5 * 3 * (cp - 1) / cp * 2 * 2 * H * layers_here / (tp * bw)
    if scheme.pp > 1:
        b += 2 * 2 * 2 * H / (tp * cp * hardware.bandwidth)
    c = params.launch_per_layer * layers_here * (1 + 0.25 * math.log2(tp * cp)) + params.fixed_overhead
    return LatencyCoeffs(a, b, c)


@dataclass
class CostProfile:
    shape: ModelShape
    hardware: HardwareSpec
    memory: MemoryConstants
    coeffs: dict
    util_threshold: float = 0.85
    max_len_override: dict = field(default_factory=dict)
    _max_len: dict = field(default_factory=dict, repr=False)
    _util_len: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.coeffs = dict(self.coeffs)
        self.max_len_override = dict(self.max_len_override)
        self.refresh()

    def _fresh_max_len(self, s):
        # measured limits replace the memory model when supplied
        if s in self.max_len_override:
            return int(self.max_len_override[s])
        try:
            return max_len(s, self)
        except InfeasibleError:
            return 0

    def refresh(self):
        self._max_len = {}
        self._util_len = {}
        for s in self.coeffs:
            self._max_len[s] = self._fresh_max_len(s)
            self._util_len[s] = (
                _util_len(self.coeffs[s], self._max_len[s], self.util_threshold) if self._max_len[s] else 0
            )

    @property
    def schemes(self):
        return list(self.coeffs)

    def coeffs_for(self, scheme) -> LatencyCoeffs:
        try:
            return self.coeffs[scheme]
        except KeyError:
            raise UnknownSchemeError(f"no latency coefficients for scheme {scheme}") from None

    def max_len_of(self, scheme) -> int:
        if scheme not in self._max_len:
            self.coeffs_for(scheme)
        return self._max_len[scheme]

    def util_len_of(self, scheme) -> int:
        if scheme not in self._util_len:
            self.coeffs_for(scheme)
        return self._util_len[scheme]

    def feasible_schemes(self):
        return [s for s in self.coeffs if self._max_len[s] > 0]

    def latency(self, l, scheme):
        return self.coeffs_for(scheme)(l)

    def to_dict(self) -> dict:
        return {
            "schema_version": PROFILE_SCHEMA,
            "model": asdict(self.shape),
            "hardware": asdict(self.hardware),
            "memory": asdict(self.memory),
            "util_threshold": self.util_threshold,
            "schemes": {
                str(s): {
                    "a": c.a,
                    "b": c.b,
                    "c": c.c,
                    "max_len": self._max_len[s],
                    "util_len": self._util_len[s],
                }
                for s, c in sorted(self.coeffs.items())
            },
            "max_len_override": {str(s): int(v) for s, v in sorted(self.max_len_override.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostProfile":
        if d.get("schema_version") != PROFILE_SCHEMA:
            raise ValidationError(f"unsupported profile schema {d.get('schema_version')!r}")
        coeffs = {
            ParallelScheme.parse(k): LatencyCoeffs(v["a"], v["b"], v["c"]) for k, v in d["schemes"].items()
        }
        return cls(
            ModelShape(**d["model"]),
            HardwareSpec(**d["hardware"]),
            MemoryConstants(**d["memory"]),
            coeffs,
            d.get("util_threshold", 0.85),
            {ParallelScheme.parse(k): v for k, v in d.get("max_len_override", {}).items()},
        )

    def audit_cache(self) -> list[str]:
        """Schemes whose cached max_len/util_len disagree with fresh recomputation."""
        bad = []
        for s in self.coeffs:
            m = self._fresh_max_len(s)
            u = _util_len(self.coeffs[s], m, self.util_threshold) if m else 0
            if (m, u) != (self._max_len[s], self._util_len[s]):
                bad.append(str(s))
        return bad


def synth_profile(ground_truth: dict, noise: float = 0.0, seed: int = 0, grid_max=32768, n_points: int = 16,
                  grid_min: int = 128) -> dict:
    """Noisy ``(l, t)`` samples on a log-spaced grid in ``[grid_min, grid_max]`` per scheme.

    ``grid_max`` may be a single int or a mapping ``scheme -> int``.
    """
    if n_points < 3:
        raise ValidationError("n_points must be >= 3")
    rng = np.random.default_rng(seed)
    out = {}
    for scheme in sorted(ground_truth):
        co = ground_truth[scheme]
        hi = grid_max[scheme] if isinstance(grid_max, dict) else grid_max
        hi = max(int(hi), grid_min + n_points)
        grid = np.unique(np.rint(np.geomspace(grid_min, hi, n_points)).astype(np.int64))
        t = co(grid.astype(np.float64))
        if noise:
            t = t * (1.0 + noise * rng.standard_normal(grid.size))
        out[scheme] = [(int(l), float(x)) for l, x in zip(grid, t)]
    return out


def default_shape() -> ModelShape:
    return ModelShape(hidden=4096, layers=32, vocab=32000)


def default_hardware(n_gpus: int = 16) -> HardwareSpec:
    return HardwareSpec(n_gpus=n_gpus, gpu_memory=80e9, flops=312e12, bandwidth=200e9, safety_margin=4e9)


def build_profile(schemes, shape=None, hardware=None, memory=None, coeffs=None,
                  roofline: RooflineParams = RooflineParams(), util_threshold: float = 0.85) -> CostProfile:
    """Profile over ``schemes``; missing coefficients come from the roofline model."""
    shape = shape or default_shape()
    hardware = hardware or default_hardware()
    memory = memory or MemoryConstants()
    table = {}
    for s in schemes:
        if coeffs and s in coeffs:
            table[s] = coeffs[s]
        else:
            table[s] = roofline_coeffs(s, shape, hardware, roofline)
    return CostProfile(shape, hardware, memory, table, util_threshold)
