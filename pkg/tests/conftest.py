from __future__ import annotations

import time

import numpy as np
import pytest
from hypothesis import settings

from absorbmfg.dynamics import NoiseBatch, PathBatch

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def make_batch(values, exit_step, absorbed=None, dt=0.1) -> PathBatch:
    """Hand-built path batch; ``values`` is ``(n, M+1, d)`` or ``(n, M+1)``."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[:, :, None]
    n, steps, d = values.shape
    exit_step = np.asarray(exit_step)
    if absorbed is None:
        absorbed = exit_step < steps - 1
    noise = NoiseBatch(values[:, 0], np.zeros((n, steps - 1, d)), np.zeros((n, steps - 1, 1)))
    return PathBatch(values, exit_step, np.asarray(absorbed), np.zeros((n, steps - 1, 1)), noise, dt)


@pytest.fixture
def batch_factory():
    return make_batch


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bankrun_equilibrium():
    """Bank-run equilibrium at the acceptance settings, shared by the slow tests.

    Returns ``(model, iterate, history, seconds)``.
    """
    from absorbmfg.dynamics import bankrun_model
    from absorbmfg.fixed_point import solve_equilibrium

    t0 = time.perf_counter()
    model = bankrun_model()
    iterate, history = solve_equilibrium(
        model, n_time=2, n_quant=1, n_paths=5000, damping=0.5, tol=0.02, max_iter=30, seed=0
    )
    return model, iterate, history, time.perf_counter() - t0
