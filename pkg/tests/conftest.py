import numpy as np
import pandas as pd
import pytest

from ivsmm.data import AdherenceMode, TimeSchedule, TrialFrame
from ivsmm.simulation import SimConfig, simulate

# criterion -> (passed, detail); filled by test_acceptance and echoed at the end
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_frame(arm, A, Y, times=None, mode=AdherenceMode.BOTH_ARMS, covariates=None):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    Y = np.asarray(Y, dtype=float).reshape(A.shape)
    times = times or tuple(range(1, A.shape[1] + 1))
    return TrialFrame(
        arm=np.asarray(arm),
        adherence=A,
        outcome=Y,
        schedule=TimeSchedule(tuple(times)),
        covariates=covariates,
        mode=mode,
    )


@pytest.fixture
def two_subject():
    """R=1, A=1, Y=2 and R=0, A=0, Y=0 with one time point."""
    return make_frame([1, 0], [1, 0], [2.0, 0.0])


@pytest.fixture(scope="session")
def e1_frame():
    return simulate(SimConfig(n=800, seed=11))


@pytest.fixture(scope="session")
def e2_frame():
    return simulate(SimConfig(n=800, outcome_model="E2", seed=12))


def random_frame(rng, n=20, K=3, mode=AdherenceMode.BOTH_ARMS, times=None):
    arm = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    A = (rng.random((n, K)) < 0.7).astype(float)
    Y = rng.normal(size=(n, K)) * 2
    if times is None:
        times = tuple(np.cumsum(rng.uniform(0.5, 4.0, K)))
    cov = pd.DataFrame({"w": rng.normal(size=n)})
    return make_frame(arm, A, Y, times=times, mode=mode, covariates=cov)
