"""Finite-difference verification of analytic gradients.

Central differences with step 1e-6 in float64 resolve gradients to roughly
1e-10 relative accuracy, far below the tolerances asserted by callers
(1e-5 for individual operations, 1e-4 for whole-model losses).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward


def numerical_grad(
    f: Callable[[], Tensor],
    wrt: Tensor,
    step: float = 1e-6,
) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` w.r.t. ``wrt.data``.

    ``f`` must re-read ``wrt.data`` on every call (i.e. rebuild its graph).
    """
    flat = wrt.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = float(f().data)
        flat[i] = keep - step
        down = float(f().data)
        flat[i] = keep
        grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(wrt.shape)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-6,
    tol: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Compare analytic and numeric gradients of scalar ``f()`` for every input.

    ``floor`` guards the relative-error denominator: entries whose gradient
    magnitude sits below it are measured against the floor instead, since
    central differences at this step cannot resolve them better than the
    roundoff of the loss itself. Deep compositions need a larger floor
    (~1e-4) than single ops because their losses are larger and noisier.

    Returns the worst relative error observed; raises AssertionError above
    ``tol``. Existing gradients on the inputs are cleared first.
    """
    for t in inputs:
        t.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for t in inputs:
        assert t.grad is not None, f"no gradient reached input with shape {t.shape}"
        num = numerical_grad(f, t, step=step)
        err = max_rel_err(t.grad, num, floor=floor)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.3e} >= {tol:.0e} for input shape {t.shape}"
    return worst


def op_gradcheck_suite(seed: int = 0, tol: float = 1e-5) -> list[tuple[str, float]]:
    """Finite-difference check of every differentiable primitive.

    Returns ``(op name, worst relative error)`` per op; raises AssertionError
    at the first op whose error reaches ``tol``.
    """
    rng = np.random.default_rng(seed)

    def leaf(*shape, positive: bool = False):
        data = rng.uniform(0.5, 1.5, shape) if positive else rng.standard_normal(shape)
        return Tensor(data, requires_grad=True)

    a = leaf(3, 4)
    b = leaf(3, 4)
    row = leaf(4)
    m = leaf(2, 3, 4)
    n = leaf(4, 5)
    pos = leaf(3, 4, positive=True)
    gamma = leaf(6)
    beta = leaf(6)
    ln_x = leaf(2, 5, 6)
    idx = rng.integers(0, 3, size=(4, 2))
    table = leaf(3, 2)

    cases: list[tuple[str, Callable[[], Tensor], tuple[Tensor, ...]]] = [
        ("add", lambda: ((a + row) * b).sum(), (a, row, b)),
        ("mul", lambda: (a * b * 0.7).sum(), (a, b)),
        ("neg", lambda: (-a).sum(), (a,)),
        ("sub", lambda: ((a - b) * (1.0 - a)).sum(), (a, b)),
        ("div", lambda: (a / 3.0).sum(), (a,)),
        ("matmul", lambda: ((m @ n) * 0.1).sum(), (m, n)),
        ("reshape", lambda: (m.reshape(6, 4) @ n).sum(), (m,)),
        ("transpose", lambda: (m.transpose((2, 0, 1)) * 0.3).sum(), (m,)),
        ("getitem", lambda: (a[1:, ::2] * b[:2, :2]).sum(), (a, b)),
        ("pad", lambda: (m.pad(((0, 1), (2, 0), (1, 1))) * 0.5).sum(), (m,)),
        ("sum", lambda: (a.sum(axis=0, keepdims=True) * row.reshape(1, 4)).sum(), (a, row)),
        ("mean", lambda: (m.mean(axis=(0, 2)) * 2.0).sum(), (m,)),
        ("exp", lambda: (a * 0.1).exp().sum(), (a,)),
        ("log", lambda: pos.log().sum(), (pos,)),
        ("gelu", lambda: T.gelu(a).sum(), (a,)),
        ("layer_norm", lambda: (T.layer_norm(ln_x, gamma, beta) * 0.2).sum(), (ln_x, gamma, beta)),
        ("concatenate", lambda: (T.concatenate([a, b, a * b], axis=1) * 0.4).sum(), (a, b)),
        ("take", lambda: (T.take(table, idx) * 0.6).sum(), (table,)),
    ]
    results = []
    for name, f, inputs in cases:
        err = check_gradients(f, inputs, tol=tol)
        results.append((name, err))
    return results
