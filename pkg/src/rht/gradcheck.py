"""Central finite-difference checks for the hand-written backward passes.

ReLU, absolute value and bilinear floor() make the losses piecewise smooth.
An entry whose central difference disagrees is re-measured with smaller
steps, so a step that happens to straddle a kink is not mistaken for a wrong
gradient; a wrong analytic gradient disagrees at every step.
"""

from dataclasses import dataclass

import numpy as np

EPS = 1e-6
RETRY_STEPS = (1e-7, 1e-8)
REL_TOL = 1e-4
# FD rounding noise is ~1e-10 at EPS; components below this magnitude are compared absolutely
ABS_FLOOR = 1e-5


def rel_error(analytic, numeric, floor=ABS_FLOOR):
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _central(f, flat, i, eps):
    old = flat[i]
    flat[i] = old + eps
    fp = f()
    flat[i] = old - eps
    fm = f()
    flat[i] = old
    return (fp - fm) / (2 * eps)


def numeric_grad(f, x, eps=EPS, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    ``indices`` restricts the check to selected flat positions; the result
    then has one entry per index.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.array([_central(f, flat, i, eps) for i in idx])
    return out.reshape(x.shape) if indices is None else out


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    tol: float = REL_TOL

    @property
    def ok(self):
        return bool(self.max_rel_error <= self.tol)

    def line(self):
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: max rel err {self.max_rel_error:.2e} over {self.n_checked} entries"


def check(name, f, x, analytic, eps=EPS, tol=REL_TOL, indices=None, retry=RETRY_STEPS):
    flat = x.reshape(-1)
    ana = np.asarray(analytic, dtype=np.float64).reshape(-1)
    idx = range(flat.size) if indices is None else list(indices)
    worst = 0.0
    for i in idx:
        err = float(rel_error(ana[i], _central(f, flat, i, eps)))
        for step in retry:
            if err <= tol:
                break
            err = min(err, float(rel_error(ana[i], _central(f, flat, i, step))))
        worst = max(worst, err)
    return CheckResult(name, worst, len(idx), tol)


def sample_indices(rng, size, k):
    if size <= k:
        return list(range(size))
    return sorted(rng.choice(size, size=k, replace=False).tolist())


def check_params(loss_fn, params, grads, rng, per_tensor=3, eps=EPS, tol=REL_TOL, names=None):
    """Spot-check ``per_tensor`` random entries of each named parameter tensor."""
    results = []
    for name in names or sorted(params):
        x = params[name]
        idx = sample_indices(rng, x.size, per_tensor)
        results.append(check(name, loss_fn, x, grads[name], eps, tol, idx))
    return results
