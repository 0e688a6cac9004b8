"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import ops
from .tensor import Tensor, parameter


def gradient_check(fn, params, h: float = 1e-5, max_coords: int | None = 64,
                   rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backprop and central differences.

    ``fn()`` must rebuild the graph from ``params`` and return a scalar tensor.
    Per parameter the error is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|)`` over a
    random subsample of at most ``max_coords`` coordinates (vector norms).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = None
    out = fn()
    if out.value.size != 1:
        raise ValueError("gradient_check needs a scalar output")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad
        flat = p.value.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().value)
            flat[i] = orig - h
            fm = float(fn().value)
            flat[i] = orig
            numeric[k] = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[idx].astype(np.float64)
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(a - numeric) / scale))
    return worst


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.uniform(gap, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _off_grid(rng, n, hi, gap=0.05):
    base = rng.integers(0, max(hi - 1, 1), size=n)
    return base + rng.uniform(gap, 1.0 - gap, size=n)


def op_cases(rng: np.random.Generator):
    """(name, params, closure) triples covering every differentiable op."""
    cases = []

    a, b = parameter(rng.normal(size=(4, 3))), parameter(rng.normal(size=(4, 3)))
    w = rng.normal(size=(4, 3))
    cases.append(("add", [a, b], lambda: ops.total(ops.mul(ops.add(a, b), w))))
    cases.append(("sub", [a, b], lambda: ops.total(ops.mul(ops.sub(a, b), w))))
    cases.append(("mul", [a, b], lambda: ops.total(ops.mul(a, b))))
    cases.append(("total", [a], lambda: ops.mean_sq_rows(ops.reshape(ops.total(ops.mul(a, w)), (1, 1)))))
    cases.append(("reshape", [a], lambda: ops.total(ops.mul(ops.reshape(a, (3, 4)), w.reshape(3, 4) ** 2))))

    m1, m2 = parameter(rng.normal(size=(3, 4))), parameter(rng.normal(size=(4, 2)))
    cases.append(("matmul", [m1, m2], lambda: ops.mean_sq_rows(ops.matmul(m1, m2))))

    s = sp.random(5, 5, density=0.5, random_state=np.random.RandomState(1), format="csr")
    x5 = parameter(rng.normal(size=(5, 2)))
    cases.append(("spmm", [x5], lambda: ops.mean_sq_rows(ops.spmm(s, x5))))

    r = parameter(rng.normal(size=(6, 2)))
    cases.append(("mean_sq_rows", [r], lambda: ops.mean_sq_rows(r)))

    xr = parameter(_away_from_zero(rng, (5, 3)))
    wr = rng.normal(size=(5, 3))
    cases.append(("relu", [xr], lambda: ops.total(ops.mul(ops.relu(xr), wr))))

    xd, wd, bd = parameter(rng.normal(size=(4, 3))), parameter(rng.normal(size=(3, 2))), parameter(rng.normal(size=2))
    cases.append(("dense", [xd, wd, bd], lambda: ops.mean_sq_rows(ops.dense(xd, wd, bd))))

    ca, cb = parameter(rng.normal(size=(4, 5))), parameter(rng.normal(size=(4, 3)))
    cw = rng.normal(size=(4, 8))
    cases.append(("concat", [ca, cb], lambda: ops.total(ops.mul(ops.concat([ca, cb], axis=1), cw))))

    xo = parameter(rng.normal(size=(6, 4)))
    seed = int(rng.integers(1 << 30))
    cases.append(("dropout", [xo], lambda: ops.mean_sq_rows(
        ops.dropout(xo, 0.5, True, np.random.default_rng(seed)))))

    xc, kc, bc = parameter(rng.normal(size=(6, 6, 2))), parameter(rng.normal(size=(3, 3, 2, 3))), parameter(rng.normal(size=3))
    wc1, wc2 = rng.normal(size=(6, 6, 3)), rng.normal(size=(3, 3, 3))

    def conv_loss():
        # both strides in one check
        y1 = ops.total(ops.mul(ops.conv2d(xc, kc, bc), wc1))
        return ops.add(y1, ops.total(ops.mul(ops.conv2d(xc, kc, bc, stride=2), wc2)))

    cases.append(("conv2d", [xc, kc, bc], conv_loss))

    vals = rng.permutation(64).astype(float).reshape(4, 4, 4) * 0.1 + rng.uniform(0, 0.01, size=(4, 4, 4))
    xp = parameter(vals)
    cases.append(("max_pool2d", [xp], lambda: ops.mean_sq_rows(ops.reshape(ops.max_pool2d(xp), (4, 4)))))

    from ..mesh import normalized_operator
    adj = sp.csr_matrix(np.array([[0, 1, 1, 0, 0], [1, 0, 1, 1, 0], [1, 1, 0, 1, 1],
                                  [0, 1, 1, 0, 1], [0, 0, 1, 1, 0]], dtype=float))
    op = normalized_operator(adj)
    xg, wg, bg = parameter(rng.normal(size=(5, 3))), parameter(rng.normal(size=(3, 4))), parameter(rng.normal(size=4))
    wgt = rng.normal(size=(5, 4))

    def gcn_loss():
        y = ops.graph_convolution(xg, op, wg, bg, activation=None)
        return ops.total(ops.mul(y, wgt))

    cases.append(("graph_convolution", [xg, wg, bg], gcn_loss))

    fm = parameter(rng.normal(size=(5, 6, 3)))
    pts = parameter(np.stack([_off_grid(rng, 7, 6), _off_grid(rng, 7, 5)], axis=1))
    wb = rng.normal(size=(7, 3))
    cases.append(("bilinear_sample", [fm, pts], lambda: ops.total(ops.mul(ops.bilinear_sample(fm, pts), wb))))

    return cases


def run_suite(rng: np.random.Generator | None = None, tol: float = 1e-4, h: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(1234) if rng is None else rng
    results = []
    for name, params, fn in op_cases(rng):
        results.append(CheckResult(name, gradient_check(fn, params, h=h, rng=rng), tol))
    return results

