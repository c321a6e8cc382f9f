"""Finite-difference verification of every backward rule.

`grad_check` compares tape gradients of a scalar-valued function against
central differences. For large parameter tensors a seeded random subset of
entries is probed so full-model checks stay within a CPU-minute.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .rng import rng_for
from .tensor import Tensor


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape and central-difference gradients of f at x.

    Relative error per entry is |g_ad − g_fd| / max(1, |g_ad|, |g_fd|).
    When max_entries is given and x is larger, only that many randomly
    chosen entries are probed.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = f(leaf)
    loss.backward()
    g_ad = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)

    flat = x.data.reshape(-1).copy()
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        if rng is None:
            rng = rng_for(0, "gradcheck-sample")
        idx = rng.choice(flat.size, size=max_entries, replace=False)
        idx.sort()

    worst = 0.0
    probe = flat.copy()
    for i in idx:
        orig = probe[i]
        probe[i] = orig + eps
        hi = f(Tensor(probe.reshape(x.shape))).item()
        probe[i] = orig - eps
        lo = f(Tensor(probe.reshape(x.shape))).item()
        probe[i] = orig
        g_fd = (hi - lo) / (2.0 * eps)
        g_tape = g_ad.reshape(-1)[i]
        err = abs(g_tape - g_fd) / max(1.0, abs(g_tape), abs(g_fd))
        worst = max(worst, err)
    return worst


def _away_from_kinks(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Push entries away from 0 so relu/clamp kinks don't poison the FD probe."""
    near = np.abs(x) < margin
    return x + near * np.sign(x + (x == 0)) * 2 * margin


def op_suite(seed: int) -> dict[str, float]:
    """Gradient-check every registered op on random inputs; name -> max error."""
    rng = rng_for(seed, "gradcheck-ops")

    def rand(*shape):
        return Tensor(rng.standard_normal(shape))

    results: dict[str, float] = {}
    a = rand(5, 7)
    b = rand(5, 7)
    results["add"] = grad_check(lambda x: (T.add(x, b)).sum(), a)
    results["add_scalar"] = grad_check(lambda x: T.add(x, 1.7).sum(), a)
    bias = rand(7)
    results["add_rowvec"] = grad_check(lambda x: T.add(x, bias).sum(), a)
    results["add_rowvec_grad"] = grad_check(lambda v: T.add(a, v).pow_scalar(2.0).sum(), bias)
    results["sub"] = grad_check(lambda x: T.sub(x, b).pow_scalar(2.0).sum(), a)
    results["neg"] = grad_check(lambda x: T.neg(x).pow_scalar(2.0).sum(), a)
    results["hadamard"] = grad_check(lambda x: T.mul(x, b).sum(), a)
    results["scale"] = grad_check(lambda x: T.mul(x, -0.31).sum(), a)

    m = rand(4, 6)
    n = rand(6, 3)
    results["matmul_lhs"] = grad_check(lambda x: T.matmul(x, n).pow_scalar(2.0).sum(), m)
    results["matmul_rhs"] = grad_check(lambda x: T.matmul(m, x).pow_scalar(2.0).sum(), n)

    x = Tensor(_away_from_kinks(rng.standard_normal((6, 5))))
    results["relu"] = grad_check(lambda t: T.relu(t).pow_scalar(2.0).sum(), x)
    results["sigmoid"] = grad_check(lambda t: T.sigmoid(t).pow_scalar(2.0).sum(), a)
    pos = Tensor(np.abs(rng.standard_normal((4, 4))) + 0.5)
    results["log"] = grad_check(lambda t: T.log(t).sum(), pos)
    results["pow_scalar"] = grad_check(lambda t: T.pow_scalar(t, 2.4).sum(), pos)
    inside = Tensor(rng.uniform(-0.8, 0.8, (5, 5)))
    results["clamp"] = grad_check(lambda t: T.clamp(t, -1.0, 1.0).pow_scalar(2.0).sum(), inside)
    results["softmax_rows"] = grad_check(lambda t: T.softmax_rows(t).pow_scalar(2.0).sum(), rand(5, 6))

    c = rand(4, 3)
    results["concat"] = grad_check(lambda t: T.concat([t, c]).pow_scalar(2.0).sum(), rand(4, 5))
    results["mean_axis0"] = grad_check(lambda t: T.mean_axis(t, 0).pow_scalar(2.0).sum(), a)
    results["mean_axis1"] = grad_check(lambda t: T.mean_axis(t, 1).pow_scalar(2.0).sum(), a)
    results["sum"] = grad_check(lambda t: t.sum(), a)
    results["reshape"] = grad_check(lambda t: t.reshape((7, 5)).pow_scalar(2.0).sum(), a)
    results["transpose"] = grad_check(lambda t: t.T.pow_scalar(2.0).sum(), a)
    results["transpose_axes"] = grad_check(
        lambda t: T.transpose(t, (2, 0, 1)).pow_scalar(2.0).sum(), rand(2, 3, 4)
    )
    results["slice_cols"] = grad_check(lambda t: T.slice_cols(t, 2, 5).pow_scalar(2.0).sum(), a)
    img = rand(2, 3, 8, 8)
    results["im2col"] = grad_check(lambda t: T.im2col(t, 3, 2).pow_scalar(2.0).sum(), img)
    return results
