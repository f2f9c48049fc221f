"""Seeded finite-difference checks of the loss and operator gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import LossWeights, class_frequencies, lovasz_softmax, total_loss, tv_loss, wce_loss
from .tensor import Tensor, conv2d, default_dtype, grad_check, ops
from .tensor.conv import CIRCULAR, ZERO

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float
    failures: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel. error {self.max_error:.3e} over {self.instances} "
                f"instances ({self.failures} above {self.tolerance:g})")


def loss_instance(rng: np.random.Generator, num_classes: int = 5, height: int = 6, width: int = 8,
                  valid_fraction: float = 0.8):
    """Standard-normal logits, uniform labels and a random validity mask."""
    logits = rng.standard_normal((num_classes, height, width))
    labels = rng.integers(0, num_classes, size=(height, width))
    mask = rng.random((height, width)) < valid_fraction
    return logits, labels, mask


def _loss_fns(labels, mask, num_classes):
    stats = class_frequencies([labels[mask]], num_classes) if mask.any() else None

    def soft(x):
        return ops.softmax(x, axis=0)

    return {
        "wce_loss": lambda x: wce_loss(soft(x), labels, mask, stats),
        "lovasz_softmax": lambda x: lovasz_softmax(soft(x), labels, mask),
        "tv_loss": lambda x: tv_loss(soft(x), labels, mask),
        "total_loss": lambda x: total_loss(soft(x), labels, mask, stats, LossWeights()),
    }


LOSS_NAMES = ("wce_loss", "lovasz_softmax", "tv_loss", "total_loss")


def loss_gradient_suite(instances: int = 100, seed: int = 0, eps: float = 1e-5,
                        tolerance: float = TOLERANCE, names=LOSS_NAMES) -> list[CheckResult]:
    """Check each loss composed with a class softmax on seeded 5 x 6 x 8 instances."""
    errors = {name: [] for name in names}
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        for _ in range(instances):
            logits, labels, mask = loss_instance(rng)
            fns = _loss_fns(labels, mask, logits.shape[0])
            for name in names:
                x = Tensor(logits.copy(), requires_grad=True)
                errors[name].append(grad_check(fns[name], [x], eps=eps))
    return [CheckResult(n, instances, max(e), int(np.sum(np.array(e) >= tolerance)), tolerance)
            for n, e in errors.items()]


def _weighted_sum(out: Tensor, rng) -> Tensor:
    weights = Tensor(rng.standard_normal(out.shape))
    return ops.sum(ops.mul(out, weights))


def _op_cases() -> dict[str, Callable[[np.random.Generator], tuple]]:
    """Each case returns ``(fn, inputs)`` with ``fn`` producing a scalar."""

    def conv_circular(rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 6)), requires_grad=True)
        k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        r = np.random.default_rng(rng.integers(1 << 31))
        w = Tensor(r.standard_normal((2, 4, 5, 6)))
        return (lambda x, k, b: ops.sum(ops.mul(conv2d(x, k, b, dilation=2, mode=CIRCULAR), w))), [x, k, b]

    def conv_strided(rng):
        x = Tensor(rng.standard_normal((1, 2, 6, 8)), requires_grad=True)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((1, 3, 3, 4)))
        return (lambda x, k: ops.sum(ops.mul(conv2d(x, k, stride=2, mode=ZERO), w))), [x, k]

    def batch_norm(rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 3, 4, 4)))

        def fn(x, g, b):
            stats = Tensor(np.zeros(3)), Tensor(np.ones(3))
            return ops.sum(ops.mul(ops.batch_norm(x, g, b, *stats, training=True), w))

        return fn, [x, g, b]

    def segment_pool(rng):
        x = Tensor(rng.standard_normal((12, 3)), requires_grad=True)
        seg = rng.integers(-1, 4, size=12)
        w1, w2 = Tensor(rng.standard_normal((4, 3))), Tensor(rng.standard_normal((4, 3)))
        return (lambda x: ops.add(ops.sum(ops.mul(ops.segment_max(x, seg, 4), w1)),
                                  ops.sum(ops.mul(ops.segment_mean(x, seg, 4), w2)))), [x]

    def gather_concat_upsample(rng):
        x = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
        idx = rng.integers(-1, 6, size=8)
        w = Tensor(rng.standard_normal((1, 4, 4, 8)))

        def fn(x):
            rows = ops.gather_rows(x, idx)                       # [8, 4]
            img = ops.reshape(ops.concat([rows, rows], axis=1), (1, 4, 2, 8))
            return ops.sum(ops.mul(ops.upsample_nearest(img)[:, :, :, :8], w))

        return fn, [x]

    def dense(rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        bias = Tensor(rng.standard_normal(5), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 5)))
        return (lambda a, b, bias: ops.sum(ops.mul(
            ops.leaky_relu(ops.add_bias(ops.matmul(a, b), bias), 0.01), w))), [a, b, bias]

    def softmax_log(rng):
        x = Tensor(rng.standard_normal((5, 3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((5, 3, 4)))
        return (lambda x: ops.sum(ops.mul(ops.log(ops.softmax(x, axis=0)), w))), [x]

    return {
        "conv2d_circular_dilated": conv_circular,
        "conv2d_strided": conv_strided,
        "batch_norm_train": batch_norm,
        "segment_max_mean": segment_pool,
        "gather_concat_upsample": gather_concat_upsample,
        "matmul_bias_leaky_relu": dense,
        "softmax_log": softmax_log,
    }


OP_NAMES = tuple(_op_cases())


def op_gradient_suite(instances: int = 100, seed: int = 0, eps: float = 1e-5,
                      tolerance: float = TOLERANCE, names=OP_NAMES) -> list[CheckResult]:
    cases = _op_cases()
    results = []
    with default_dtype(np.float64):
        for name in names:
            rng = np.random.default_rng([seed, OP_NAMES.index(name)])
            errs = []
            for _ in range(instances):
                fn, inputs = cases[name](rng)
                errs.append(grad_check(fn, inputs, eps=eps))
            results.append(CheckResult(name, instances, max(errs),
                                       int(np.sum(np.array(errs) >= tolerance)), tolerance))
    return results
