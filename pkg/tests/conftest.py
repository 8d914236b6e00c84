import hashlib
import json
import os

import numpy as np
import pytest

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def digest(arr):
    """Checksum of float64 values rounded to 10 significant digits (platform-stable)."""
    a = np.asarray(arr, dtype=np.float64)
    text = ",".join(f"{v:.9e}" for v in a.ravel())
    return hashlib.sha256(f"{a.shape}|{text}".encode()).hexdigest()


def check_golden(name, arr):
    """Compare against tests/golden/<name>.json; the first run records it."""
    path = os.path.join(GOLDEN, f"{name}.json")
    a = np.asarray(arr, dtype=np.float64)
    rec = {"shape": list(a.shape), "sha256": digest(a), "sum": float(a.sum()),
           "head": [float(v) for v in a.ravel()[:8]]}
    if not os.path.exists(path):
        with open(path, "w") as f:
            json.dump(rec, f, indent=2)
            f.write("\n")
        return
    with open(path) as f:
        want = json.load(f)
    assert want["shape"] == rec["shape"]
    np.testing.assert_allclose(rec["head"], want["head"], rtol=1e-9, atol=1e-12)
    assert rec["sum"] == pytest.approx(want["sum"], rel=1e-9, abs=1e-12)
    assert rec["sha256"] == want["sha256"]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines, echoed together at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("]")[0].split("[")[1])):
            terminalreporter.write_line(line)
