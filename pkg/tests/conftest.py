import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hydraplan.cost_model import (  # noqa: E402
    CostProfile,
    HardwareSpec,
    LatencyCoeffs,
    MemoryConstants,
    ModelShape,
)


def make_profile(coeffs, max_lens, flops=312e12, bandwidth=200e9, n_gpus=64):
    """Profile with explicit coefficients and capacities, bypassing the memory model."""
    coeffs = {s: c if isinstance(c, LatencyCoeffs) else LatencyCoeffs(*c) for s, c in coeffs.items()}
    return CostProfile(
        ModelShape(1024, 32, 1000),
        HardwareSpec(n_gpus, 80e9, flops, bandwidth, 0.0),
        MemoryConstants(),
        coeffs,
        max_len_override=max_lens,
    )


@pytest.fixture
def profile_factory():
    return make_profile


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
