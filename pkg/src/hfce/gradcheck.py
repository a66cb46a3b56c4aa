"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numeric_partial(loss_fn: Callable[[], Tensor], tensor: Tensor,
                    flat_index: int, step: float = 1e-6) -> float:
    """Central difference of the scalar loss wrt one tensor coordinate."""
    flat = tensor.data.reshape(-1)
    orig = flat[flat_index]
    with no_grad():
        flat[flat_index] = orig + step
        up = float(loss_fn().data)
        flat[flat_index] = orig - step
        down = float(loss_fn().data)
    flat[flat_index] = orig
    return (up - down) / (2.0 * step)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    samples_per_tensor: int = 8, step: float = 1e-6,
                    seed: int = 0, rel_floor: float = 1e-3) -> float:
    """Max relative error between analytic and numeric gradients.

    Samples coordinates from each tensor (all of them when small). The
    relative error divides by max(|analytic|, |numeric|, rel_floor) so that
    finite-difference noise on near-zero entries is judged against the
    working gradient scale rather than blowing up.
    """
    for t in tensors:
        t.zero_grad()
    loss = loss_fn()
    backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue
        analytic = (np.zeros_like(t.data) if t.grad is None else t.grad).reshape(-1)
        n = t.data.size
        if n <= samples_per_tensor:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=samples_per_tensor, replace=False)
        for i in idxs:
            num = numeric_partial(loss_fn, t, int(i), step)
            ana = float(analytic[i])
            err = abs(ana - num) / max(abs(ana), abs(num), rel_floor)
            worst = max(worst, err)
    return worst
