import math

import numpy as np
import pytest

from radiomap.scene_io import AntennaPattern, Scene

_CRITERIA: list[str] = []


def make_scene(h=16, w=16, tx=(7.5, 7.5), cell=0.25, freq=2400.0, trans=None, refl=None,
               antenna=None, orientation=0.0):
    trans = np.zeros((h, w)) if trans is None else np.asarray(trans, dtype=np.float64)
    refl = np.zeros((h, w)) if refl is None else np.asarray(refl, dtype=np.float64)
    return Scene(refl, trans, cell, tx[0], tx[1], freq, antenna or AntennaPattern.isotropic(), orientation)


def supersampled_loss(trans, p0, p1, cell, n=100_000):
    """Midpoint-rule line integral of the attenuation grid; independent of the traversal."""
    t = (np.arange(n) + 0.5) / n
    r = p0[0] + t * (p1[0] - p0[0])
    c = p0[1] + t * (p1[1] - p0[1])
    ds = math.hypot(p1[0] - p0[0], p1[1] - p0[1]) * cell / n
    return float(np.sum(trans[np.floor(r).astype(int), np.floor(c).astype(int)]) * ds)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(capsys):
    """Record one acceptance line: criterion(n, title, ok, detail)."""
    def record(n, title, ok, detail=""):
        line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        _CRITERIA.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
