"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError
from .tensor import Tensor, scan_nonfinite


def finite_diff_check(builder: Callable[[Sequence[Tensor]], Tensor],
                      inputs: Sequence[np.ndarray],
                      eps: float = 1e-4) -> float:
    """Compare analytic gradients against central differences.

    ``builder`` maps a list of leaf tensors to a scalar output and is
    re-invoked for every perturbed evaluation, so it must be a pure
    function of its inputs. All arrays are promoted to 64-bit. Returns
    the maximum over every element of every input of

        |analytic - numeric| / max(1, |analytic|, |numeric|)
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    root = builder(leaves)
    if root.size != 1:
        raise ShapeError(f"builder must produce a scalar, got shape {root.shape}")
    root.backward()
    bad = scan_nonfinite(root)
    if bad is not None:
        raise NumericalError(
            f"non-finite {bad[1]} produced by op {bad[0]!r} during gradient check"
        )
    analytic = []
    for leaf in leaves:
        if leaf.grad is None:
            analytic.append(np.zeros_like(leaf.data))
        else:
            analytic.append(np.array(leaf.grad, copy=True))

    def eval_at(arrs):
        out = builder([Tensor(a) for a in arrs])
        val = out.data.reshape(-1)[0]
        if not np.isfinite(val):
            raise NumericalError(
                f"non-finite value from op {out.op!r} during finite differencing"
            )
        return float(val)

    worst = 0.0
    for i, base in enumerate(arrays):
        flat = base.reshape(-1)
        grad_flat = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            work = [a.copy() for a in arrays]
            wf = work[i].reshape(-1)
            wf[j] = orig + eps
            up = eval_at(work)
            wf[j] = orig - eps
            down = eval_at(work)
            numeric = (up - down) / (2.0 * eps)
            a = grad_flat[j]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
