"""Finite-difference verification of tape gradients.

All checking runs in float64 regardless of the forward precision: central
differences in float32 cannot certify errors at the 1e-4 level.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def finite_diff_check(fn: Callable[..., Tensor],
                      inputs: Sequence[np.ndarray],
                      eps: float = 1e-5,
                      sample: int | None = None,
                      seed: int = 0) -> float:
    """Max gradient error of `fn` against central differences.

    fn takes one Tensor per input array and returns a scalar Tensor.
    The reported error is relative for gradient magnitudes above 1 and
    absolute below, so tiny true gradients do not blow up the ratio.
    `sample` limits the check to that many seeded random elements per
    input, which keeps sweeps over composed blocks affordable.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = fn(*leaves)
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)

    def eval_at() -> float:
        return float(fn(*[Tensor(a) for a in arrays]).data)

    worst = 0.0
    for a, leaf in zip(arrays, leaves):
        ga = grads.get(leaf)
        ga = np.zeros_like(a) if ga is None else np.asarray(ga, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = ga.reshape(-1)
        if sample is None or sample >= flat.size:
            indices = range(flat.size)
        else:
            indices = rng.choice(flat.size, size=sample, replace=False)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            fp = eval_at()
            flat[i] = orig - eps
            fm = eval_at()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), 1.0)
            worst = max(worst, err)
    return worst
