import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from msgate.ion_chain import ChainConfig, chain_modes
from msgate.pulse_solver import GateSpec, design_pulse

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# 729 nm beam projected fully onto the radial axis
K_RADIAL = 2 * math.pi / 729e-9

FIVE_ION = dict(n_ions=5, axial_freq_hz=264.8e3, radial_freq_hz=1.0e6,
                wavevector_radial=K_RADIAL, illuminated_pair=(1, 2))

# criterion number -> list of (part, passed, detail)
ACCEPTANCE = {}


def record(criterion, part, passed, detail):
    """Store one checked part of an acceptance criterion for the summary."""
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(passed), detail))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{name}{'' if ok else ' [FAIL]'}: {d}" for name, ok, d in parts)
        terminalreporter.write_line(f"criterion {n}: {verdict}  {detail}")


@pytest.fixture(scope="session")
def five_chain():
    return ChainConfig(**FIVE_ION)


@pytest.fixture(scope="session")
def five_modes(five_chain):
    return chain_modes(five_chain)


@pytest.fixture(scope="session")
def five_gate():
    return GateSpec.from_hz(1.034e6, 41.74e-6)


@pytest.fixture(scope="session")
def five_design(five_modes, five_gate):
    return design_pulse(five_modes, five_gate)


@pytest.fixture(scope="session")
def two_chain():
    return ChainConfig(n_ions=2, axial_freq_hz=0.5e6, radial_freq_hz=1.0e6,
                       wavevector_radial=K_RADIAL, illuminated_pair=(0, 1))


@pytest.fixture(scope="session")
def two_modes(two_chain):
    return chain_modes(two_chain)


@pytest.fixture(scope="session")
def two_gate():
    return GateSpec.from_hz(1.05e6, 40e-6)


@pytest.fixture(scope="session")
def two_design(two_modes, two_gate):
    return design_pulse(two_modes, two_gate)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
