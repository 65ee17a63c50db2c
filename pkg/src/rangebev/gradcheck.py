"""Finite-difference gradient checks for every registered operation.

Each check builds a small double-precision problem from a seed, compares
analytic gradients against central differences (step 1e-5), and reports
the max relative error.  The registry covers the primitive ops, the full
attention layer, and all three losses.
"""

from __future__ import annotations

import numpy as np

from . import losses as L
from . import tensor as T
from .attention import RangeAttentionConv
from .tensor import Parameter, Tensor, finite_difference_check

STEP = 1e-5


def _t(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True,
                  dtype=np.float64)


def _weighted(out, rng):
    # A fixed random weighting turns any output into a scalar loss.
    w = Tensor(rng.uniform(-1.0, 1.0, size=out.shape))
    return T.sum(T.mul(out, w))


def _check_conv2d(rng):
    x = _t(rng, (1, 2, 5, 5))
    k = _t(rng, (3, 2, 3, 3))
    b = _t(rng, (3,))
    stride = int(rng.integers(1, 3))
    return finite_difference_check(
        lambda: _weighted(T.conv2d(x, k, b, stride=stride, padding=1), rng0(rng)),
        [x, k, b], STEP,
    )


class rng0:
    """Freeze a weighting draw so repeated fn() calls see identical values."""

    def __init__(self, rng):
        self.state = rng.bit_generator.state

    def uniform(self, lo, hi, size):
        r = np.random.default_rng()
        r.bit_generator.state = self.state
        return r.uniform(lo, hi, size=size)


def _elementwise(op, lo=-2.0, hi=2.0, shape=(2, 3, 4)):
    def check(rng):
        x = _t(rng, shape, lo, hi)
        w = rng0(rng)
        return finite_difference_check(lambda: _weighted(op(x), w), [x], STEP)

    return check


def _check_add(rng):
    a = _t(rng, (2, 3, 4, 4))
    b = _t(rng, (2, 3, 4, 4))
    w = rng0(rng)
    return finite_difference_check(lambda: _weighted(T.add(a, b), w), [a, b], STEP)


def _check_broadcast_mul(rng):
    a = _t(rng, (2, 1, 4, 4))
    b = _t(rng, (2, 3, 4, 4))
    w = rng0(rng)
    return finite_difference_check(
        lambda: _weighted(T.broadcast_mul(a, b), w), [a, b], STEP
    )


def _check_concat(rng):
    a = _t(rng, (2, 2, 3, 3))
    b = _t(rng, (2, 3, 3, 3))
    w = rng0(rng)
    return finite_difference_check(
        lambda: _weighted(T.concat_channels(a, b), w), [a, b], STEP
    )


def _check_channel_max(rng):
    # Well-separated values keep the argmax stable under the FD step.
    x = Tensor(
        rng.permutation(np.arange(2 * 4 * 3 * 3, dtype=np.float64)).reshape(2, 4, 3, 3)
        * 0.1,
        requires_grad=True, dtype=np.float64,
    )
    w = rng0(rng)
    return finite_difference_check(lambda: _weighted(T.channel_max(x), w), [x], STEP)


def _check_upsample(rng):
    x = _t(rng, (1, 2, 3, 3))
    w = rng0(rng)
    return finite_difference_check(
        lambda: _weighted(T.upsample_nearest(x, 2), w), [x], STEP
    )


def _check_clamp(rng):
    # Sampled away from the clamp band edges; the kink has no valid FD.
    x = Tensor(
        np.where(rng.random((3, 4)) < 0.5,
                 rng.uniform(-2.0, -1.2, size=(3, 4)),
                 rng.uniform(-0.8, 0.8, size=(3, 4))),
        requires_grad=True, dtype=np.float64,
    )
    w = rng0(rng)
    return finite_difference_check(
        lambda: _weighted(T.clamp(x, -1.0, 1.0), w), [x], STEP
    )


def _check_raaconv(rng):
    layer = RangeAttentionConv(rng, 2, 4, relu=False, dtype=np.float64)
    x = _t(rng, (1, 2, 5, 5))
    params = [x] + layer.parameters()
    return finite_difference_check(
        lambda: T.sum(layer.forward(x)), params, STEP
    )


def _check_focal_heatmap(rng):
    gt = rng.uniform(0.0, 0.95, size=(2, 6, 6))
    gt[0, 2, 3] = 1.0
    gt[1, 4, 1] = 1.0
    logits = _t(rng, (2, 6, 6), -2.0, 2.0)
    return finite_difference_check(
        lambda: L.focal_heatmap_loss_logits(logits, gt), [logits], STEP,
    )


def _check_box_loss(rng):
    pred = _t(rng, (8, 5, 5), -2.0, 2.0)
    tgt = rng.uniform(-1.5, 1.5, size=(8, 5, 5))
    # Keep |pred - target| away from the smooth-L1 kink at 1.
    d = np.abs(pred.data - tgt)
    tgt = np.where((d > 0.98) & (d < 1.02), tgt + 0.05, tgt)
    mask = rng.random((5, 5)) < 0.4
    return finite_difference_check(
        lambda: L.box_loss(pred, tgt, mask)[0], [pred], STEP
    )


def _check_density_loss(rng):
    logits = _t(rng, (5, 3), -2.0, 2.0)
    labels = rng.integers(1, 4, size=5)
    return finite_difference_check(
        lambda: L.density_loss(logits, labels)[0], [logits], STEP
    )


REGISTRY = {
    "conv2d": _check_conv2d,
    "sigmoid": _elementwise(T.sigmoid),
    "relu": _elementwise(T.relu, lo=0.1, hi=2.0),
    "add": _check_add,
    "broadcast_mul": _check_broadcast_mul,
    "concat_channels": _check_concat,
    "channel_max": _check_channel_max,
    "channel_mean": _elementwise(T.channel_mean, shape=(2, 3, 4, 4)),
    "upsample_nearest": _check_upsample,
    "log": _elementwise(T.log, lo=0.2, hi=3.0),
    "pow": _elementwise(lambda x: T.pow(x, 2.5), lo=0.2, hi=2.0),
    "clamp": _check_clamp,
    "smooth_l1": _elementwise(lambda x: T.smooth_l1(x), lo=-0.9, hi=0.9),
    "raaconv": _check_raaconv,
    "focal_heatmap_loss": _check_focal_heatmap,
    "box_loss": _check_box_loss,
    "density_loss": _check_density_loss,
}


def run_gradcheck(ops=None, seeds=20, base_seed=0, tolerance=1e-4):
    """Per-op worst relative error over ``seeds`` random problems.

    Returns a dict op -> (max_error, passed).
    """
    names = list(REGISTRY) if ops in (None, "all") else [ops]
    for n in names:
        if n not in REGISTRY:
            raise ValueError(f"unknown op {n!r}; known: {sorted(REGISTRY)}")
    results = {}
    for name in names:
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng(base_seed * 10_000 + s)
            worst = max(worst, REGISTRY[name](rng))
        results[name] = (worst, worst < tolerance)
    return results
