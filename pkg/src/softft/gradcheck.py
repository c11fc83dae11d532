"""Finite-difference verification of every differentiable operation.

Each check draws a random point, compares backprop against central
differences and reports the worst relative error.  The dual-head check runs
the full paired loss through a small conv backbone with both heads.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .model import BackboneConfig, LayerSpec, add_head, build_model, forward_features, forward_head
from .seeding import rng_for
from .trainer import SOURCE, TARGET, combined_loss

TOLERANCE = 1e-6


def _matmul(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    return [a, b], lambda _: ad.sum_all(ad.mul(ad.matmul(a, b), Tensor(w)))


def _conv2d(rng):
    x = Tensor(rng.normal(size=(2, 2, 6, 6)))
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    w = rng.normal(size=(2, 3, 2, 2))
    return [x, k], lambda _: ad.sum_all(ad.mul(ad.conv2d(x, k, 2), Tensor(w)))


def _relu(rng):
    # keep values away from the kink so central differences are valid
    v = rng.normal(size=(4, 5))
    v = np.where(np.abs(v) < 0.05, 0.5, v)
    x = Tensor(v)
    w = rng.normal(size=(4, 5))
    return [x], lambda _: ad.sum_all(ad.mul(ad.relu(x), Tensor(w)))


def _cross_entropy(rng):
    logits = Tensor(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 4, size=6)
    return [logits], lambda _: ad.softmax_cross_entropy(logits, labels, 0.1)


def _dual_head(rng):
    config = BackboneConfig((1, 7, 7), (LayerSpec("conv", 2, 3, 1), LayerSpec("conv", 3, 3, 2), LayerSpec("linear", 4)))
    seed = int(rng.integers(0, 2**31))
    model = add_head(build_model(config, [(SOURCE, 3)], seed), TARGET, 2, seed + 1)
    # He init leaves many units near zero; shift biases so no pre-activation sits on the kink
    for _, b in model.backbone:
        b.values += 0.1
    xs, ys = rng.normal(size=(3, 1, 7, 7)), rng.integers(0, 3, size=3)
    xt, yt = rng.normal(size=(3, 1, 7, 7)), rng.integers(0, 2, size=3)
    alpha = float(rng.uniform(0, 1))
    params = [p for _, p in model.parameters()]

    def loss(_):
        ls = ad.softmax_cross_entropy(forward_head(model, SOURCE, forward_features(model, Tensor(xs))), ys, 0.1)
        lt = ad.softmax_cross_entropy(forward_head(model, TARGET, forward_features(model, Tensor(xt))), yt, 0.1)
        return combined_loss(ls, lt, alpha)

    return params, loss


CHECKS: dict[str, Callable] = {
    "matmul": _matmul,
    "conv2d": _conv2d,
    "relu": _relu,
    "softmax_cross_entropy": _cross_entropy,
    "dual_head_loss": _dual_head,
}


def run_gradchecks(seed: int = 0, points: int = 3) -> dict[str, list[float]]:
    """Worst relative error per operation at ``points`` random points each."""
    out = {}
    for name, make in CHECKS.items():
        errors = []
        for i in range(points):
            params, f = make(rng_for(seed, "gradcheck", name, i))
            errors.append(finite_diff_check(f, params))
        out[name] = errors
    return out
