"""Shared oracles for the test suite."""

import numpy as np

from amortgmn.tensor import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_grad(op, *shapes, rng, h=1e-5, positive=False, seed_weights=True):
    """Compare analytic and numeric gradients of sum(w * op(inputs)) for every input."""
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    out_shape = op(*[Tensor(x) for x in xs]).shape
    w = rng.normal(size=out_shape) if seed_weights else np.ones(out_shape)
    errs = []
    for k in range(len(xs)):
        ts = [Tensor(x, requires_grad=(i == k)) for i, x in enumerate(xs)]
        loss = (op(*ts) * Tensor(w)).sum()
        loss.backward()

        def f(xk):
            args = [Tensor(xk if i == k else x) for i, x in enumerate(xs)]
            return float((op(*args).data * w).sum())

        errs.append(rel_err(ts[k].grad, numeric_grad(f, xs[k], h)))
    return max(errs)
