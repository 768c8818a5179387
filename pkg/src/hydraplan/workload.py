"""Sequence-length corpora: loading, synthesis, mini-batch sampling, histograms."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

FORMATS = ("csv", "jsonl", "binary-u32")


@dataclass(frozen=True)
class LengthSample:
    lengths: tuple[int, ...]

    def __post_init__(self):
        if not self.lengths:
            raise ValidationError("length sample is empty")
        if min(self.lengths) < 1:
            raise ValidationError("every length must be >= 1")

    @classmethod
    def from_array(cls, arr) -> "LengthSample":
        return cls(tuple(int(x) for x in np.asarray(arr).ravel()))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.lengths, dtype=np.int64)

    def __len__(self):
        return len(self.lengths)

    @property
    def total_tokens(self) -> int:
        return int(sum(self.lengths))


@dataclass(frozen=True)
class MiniBatch:
    lengths: tuple[int, ...]
    token_budget: int
    seed: int
    context_length: int = 0

    @property
    def total_tokens(self) -> int:
        return int(sum(self.lengths))

    def to_dict(self) -> dict:
        return {
            "lengths": list(self.lengths),
            "token_budget": self.token_budget,
            "seed": self.seed,
            "context_length": self.context_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MiniBatch":
        return cls(tuple(d["lengths"]), d["token_budget"], d["seed"], d.get("context_length", 0))


@dataclass(frozen=True)
class LengthHistogram:
    """Counts per half-open bin ``(k*w, (k+1)*w]``.

    ``mode`` records how ``total_tokens`` was obtained: ``"exact"`` sums the
    raw lengths, ``"midpoint"`` sums bin midpoints weighted by count.
    """

    bin_width: int
    counts: tuple[int, ...]
    total_sequences: int
    total_tokens: float
    mode: str = "exact"
    token_counts: tuple[int, ...] = field(default=())

    def midpoints(self) -> np.ndarray:
        k = np.arange(len(self.counts), dtype=np.float64)
        return k * self.bin_width + (self.bin_width + 1) / 2.0

    def to_dict(self) -> dict:
        return {
            "bin_width": self.bin_width,
            "counts": list(self.counts),
            "total_sequences": self.total_sequences,
            "total_tokens": self.total_tokens,
            "mode": self.mode,
        }


def load_lengths(path, fmt: str | None = None) -> LengthSample:
    path = Path(path)
    fmt = fmt or infer_format(path)
    if fmt not in FORMATS:
        raise ValidationError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if fmt == "binary-u32":
        raw = path.read_bytes()
        if not raw:
            raise ParseError(f"{path}: empty file")
        if len(raw) % 4:
            raise ParseError(f"{path}: size {len(raw)} is not a multiple of 4", index=len(raw) // 4)
        arr = np.frombuffer(raw, dtype="<u4")
        bad = np.flatnonzero(arr == 0)
        if bad.size:
            raise ParseError(f"{path}: record {bad[0]} has length 0", index=int(bad[0]))
        return LengthSample(tuple(arr.tolist()))

    lengths = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                if fmt == "csv":
                    value = int(line.split(",")[0])
                else:
                    value = json.loads(line)["len"]
                    if not isinstance(value, int) or isinstance(value, bool):
                        raise TypeError(value)
            except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ParseError(f"{path}:{lineno}: cannot parse {line!r}", index=lineno) from exc
            if value < 1:
                raise ParseError(f"{path}:{lineno}: length {value} < 1", index=lineno)
            lengths.append(value)
    if not lengths:
        raise ParseError(f"{path}: empty file")
    return LengthSample(tuple(lengths))


def save_lengths(sample: LengthSample, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or infer_format(path)
    if fmt == "binary-u32":
        path.write_bytes(np.asarray(sample.lengths, dtype="<u4").tobytes())
    elif fmt == "csv":
        path.write_text("".join(f"{x}\n" for x in sample.lengths))
    elif fmt == "jsonl":
        path.write_text("".join(json.dumps({"len": x}) + "\n" for x in sample.lengths))
    else:
        raise ValidationError(f"unknown format {fmt!r}")


def infer_format(path: Path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".csv" or suffix == ".txt":
        return "csv"
    if suffix in (".jsonl", ".json"):
        return "jsonl"
    return "binary-u32"


def synth_longtail(distribution: str, n: int, context_length: int, seed: int, **params) -> LengthSample:
    """Draw ``n`` lengths from a long-tailed law, clamped to ``[1, context_length]``.

    ``lognormal`` takes ``mu`` and ``sigma`` (of the underlying normal);
    ``pareto`` takes ``alpha`` and ``xmin``.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if context_length < 1:
        raise ValidationError("context_length must be >= 1")
    rng = np.random.default_rng(seed)
    if distribution == "lognormal":
        mu, sigma = params.get("mu"), params.get("sigma")
        if mu is None or sigma is None or sigma <= 0:
            raise ValidationError("lognormal needs mu and sigma > 0")
        draws = rng.lognormal(mean=mu, sigma=sigma, size=n)
    elif distribution == "pareto":
        alpha, xmin = params.get("alpha"), params.get("xmin")
        if alpha is None or xmin is None or alpha <= 0 or xmin <= 0:
            raise ValidationError("pareto needs alpha > 0 and xmin > 0")
        # numpy's pareto is the Lomax form; shift to the classical support [xmin, inf)
        draws = xmin * (1.0 + rng.pareto(alpha, size=n))
    else:
        raise ValidationError(f"unknown distribution {distribution!r}")
    lengths = np.clip(np.rint(draws), 1, context_length).astype(np.int64)
    return LengthSample(tuple(lengths.tolist()))


def sample_minibatch(sample: LengthSample, token_budget: int, context_length: int, seed: int) -> MiniBatch:
    if token_budget < 1:
        raise ValidationError("token_budget must be >= 1")
    if context_length < 1:
        raise ValidationError("context_length must be >= 1")
    rng = np.random.default_rng(seed)
    pool = sample.lengths
    picked = []
    total = 0
    # draw in blocks; the stop rule is applied per draw so block size is irrelevant
    while total < token_budget:
        block = rng.integers(0, len(pool), size=64)
        for idx in block:
            length = min(pool[idx], context_length)
            picked.append(length)
            total += length
            if total >= token_budget:
                break
    return MiniBatch(tuple(picked), token_budget, seed, context_length)


def build_histogram(sample: LengthSample, bin_width: int) -> LengthHistogram:
    if bin_width < 1:
        raise ValidationError("bin_width must be >= 1")
    arr = sample.as_array()
    bins = (arr - 1) // bin_width
    counts = np.bincount(bins)
    tokens = np.bincount(bins, weights=arr).astype(np.int64)
    return LengthHistogram(
        bin_width=bin_width,
        counts=tuple(int(c) for c in counts),
        total_sequences=int(arr.size),
        total_tokens=float(arr.sum()),
        mode="exact",
        token_counts=tuple(int(t) for t in tokens),
    )


def histogram_from_counts(counts, bin_width: int) -> LengthHistogram:
    """Histogram built from counts alone; totals use bin midpoints."""
    counts = tuple(int(c) for c in counts)
    if any(c < 0 for c in counts):
        raise ValidationError("counts must be non-negative")
    mids = np.arange(len(counts)) * bin_width + (bin_width + 1) / 2.0
    return LengthHistogram(
        bin_width=bin_width,
        counts=counts,
        total_sequences=sum(counts),
        total_tokens=float(math.fsum(m * c for m, c in zip(mids, counts))),
        mode="midpoint",
    )
