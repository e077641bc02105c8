import numpy as np
import pytest

from hybridyn.dynamics import RobotModel, reference_robot


def planar_arm(lengths, masses=None, com_frac=0.5, inertia=None, gravity=(0.0, -9.81, 0.0)):
    """Planar nR chain in the x-y plane (DH alpha = 0), link frames at distal joints."""
    n = len(lengths)
    masses = np.ones(n) if masses is None else np.asarray(masses, dtype=float)
    dh = np.array([[L, 0.0, 0.0, 0.0] for L in lengths])
    com = np.array([[-(1.0 - com_frac) * L, 0.0, 0.0] for L in lengths])
    if inertia is None:
        inertia = [np.diag([0.01, 0.02, 0.03])] * n
    limits = np.tile([-np.pi, np.pi], (n, 1))
    return RobotModel(dh, masses, com, inertia, limits, gravity)


@pytest.fixture(scope="session")
def robot():
    return reference_robot()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, filled in by test_acceptance.py and printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
