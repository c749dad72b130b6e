import numpy as np
import pytest

from gaitmeta.synthgait import Benchmark, generate_cohort_sessions


def rel_err(a, b, floor=1e-8):
    """Max-norm relative error of ``a`` against reference ``b``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def central_diff(f, x, h):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


@pytest.fixture(scope="session")
def small_bench():
    """Three subjects with short treadmill trials; cheap enough for unit tests."""
    _, sessions = generate_cohort_sessions(7, n_subjects=3, trial_scale=0.1)
    return Benchmark(sessions)
