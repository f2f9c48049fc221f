"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..exceptions import ContractError
from .core import Tensor, no_grad


def numeric_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor], target: Tensor,
                     coords: Sequence[int], eps: float) -> np.ndarray:
    """Central differences of ``fn(*inputs)`` w.r.t. ``target`` at flat ``coords``."""
    flat = target.data.reshape(-1)
    out = np.empty(len(coords))
    with no_grad():
        for k, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(*inputs).data)
            flat[i] = orig - eps
            lo = float(fn(*inputs).data)
            flat[i] = orig
            out[k] = (hi - lo) / (2 * eps)
    return out


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1e-8,
    |analytic| + |numeric|)``. ``sample`` restricts the check to that many
    randomly chosen coordinates across all inputs requiring gradients.
    """
    for t in inputs:
        if t.requires_grad and t.dtype != np.float64:
            raise ContractError("grad_check needs float64 tensors")
    out = fn(*inputs)
    if out.size != 1:
        raise ContractError("grad_check function must return a scalar")
    out.backward()
    targets = [t for t in inputs if t.requires_grad]
    analytic = [t.grad.reshape(-1).copy() if t.grad is not None else np.zeros(t.size) for t in targets]

    pairs = [(ti, i) for ti, t in enumerate(targets) for i in range(t.size)]
    if sample is not None and sample < len(pairs):
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(pairs), size=sample, replace=False)
        pairs = [pairs[j] for j in sorted(chosen)]

    worst = 0.0
    for ti, t in enumerate(targets):
        coords = [i for tj, i in pairs if tj == ti]
        if not coords:
            continue
        num = numeric_gradient(fn, inputs, t, coords, eps)
        ana = analytic[ti][coords]
        err = np.abs(ana - num) / np.maximum(1e-8, np.abs(ana) + np.abs(num))
        worst = max(worst, float(err.max()))
    return worst
