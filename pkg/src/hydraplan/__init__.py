"""Heterogeneous parallel strategy planning and pipeline simulation for variable-length sequences."""

__version__ = "0.1.0"

from .cost_model import CostProfile, LatencyCoeffs, build_profile, fit_latency, overlap_threshold  # noqa: E402
from .estimators import HeteroPlanner, LatencyModel  # noqa: E402
from .planner import PlannerOptions, StrategyPlan, plan_strategy, select_strategy  # noqa: E402
from .proposal import CandidateSet, propose  # noqa: E402
from .schemes import ParallelScheme, Strategy, enumerate_schemes  # noqa: E402
from .simulator import SimConfig, compare_policies, simulate_pipeline, simulate_strategy  # noqa: E402
from .workload import LengthSample, MiniBatch, load_lengths, sample_minibatch, synth_longtail  # noqa: E402

__all__ = [
    "CandidateSet",
    "CostProfile",
    "HeteroPlanner",
    "LatencyCoeffs",
    "LatencyModel",
    "LengthSample",
    "MiniBatch",
    "ParallelScheme",
    "PlannerOptions",
    "SimConfig",
    "Strategy",
    "StrategyPlan",
    "build_profile",
    "compare_policies",
    "enumerate_schemes",
    "fit_latency",
    "load_lengths",
    "overlap_threshold",
    "plan_strategy",
    "propose",
    "sample_minibatch",
    "select_strategy",
    "simulate_pipeline",
    "simulate_strategy",
    "synth_longtail",
]
