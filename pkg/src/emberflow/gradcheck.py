"""Finite-difference verification of every hand-written backward pass.

All checks run in float64 with central differences (h=1e-5); single
precision is too coarse to distinguish a wrong gradient from roundoff.
"""

from __future__ import annotations

import numpy as np

from .layers import (BatchNorm2d, Conv2d, Linear, MaxPool2d, ModelConfig,
                     ReLU, Dropout, build_model, softmax_cross_entropy)
from .tensor import Rng

H_STEP = 1e-5

TINY_CONFIG = ModelConfig(
    conv_channels=(2, 3, 4),
    hidden_units=5,
    dropout_rate=0.0,
    input_shape=(1, 8, 8),
)


def numeric_grad(f, x: np.ndarray, h: float = H_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to x, in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.abs(analytic - numeric).max(initial=0.0))
    denom = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0))
    if denom < 1e-7:
        # both gradients vanish (e.g. a conv bias followed by batch norm);
        # compare absolutely instead of dividing noise by noise
        return diff
    return diff / denom


def _check_layer(layer, x: np.ndarray, rng: Rng) -> float:
    """Max relative error over dx and all parameter gradients, using the
    probe scalar g = <forward(x), R> for a fixed random R."""
    y = layer.forward(x.copy(), True)
    r = rng.normal(y.shape, dtype=np.float64)

    for slot in layer.params():
        slot.grad[...] = 0
    layer.forward(x, True)
    dx = layer.backward(r)

    def g():
        return float((layer.forward(x, True) * r).sum())

    worst = rel_error(dx, numeric_grad(g, x))
    for slot in layer.params():
        worst = max(worst, rel_error(slot.grad, numeric_grad(g, slot.value)))
    return worst


def check_conv(seed: int) -> float:
    rng = Rng(seed)
    layer = Conv2d("conv", 2, 3, 3, 1, 1, rng, np.float64)
    x = rng.normal((2, 2, 5, 5), dtype=np.float64)
    return _check_layer(layer, x, rng)


def check_bn(seed: int) -> float:
    rng = Rng(seed)
    layer = BatchNorm2d("bn", 3, np.float64)
    layer.gamma.value[...] = rng.normal((3,), 1.0, 0.2, dtype=np.float64)
    layer.beta.value[...] = rng.normal((3,), 0.0, 0.2, dtype=np.float64)
    x = rng.normal((4, 3, 3, 3), dtype=np.float64)
    return _check_layer(layer, x, rng)


def check_relu(seed: int) -> float:
    rng = Rng(seed)
    x = rng.normal((3, 7), dtype=np.float64)
    # keep clear of the kink at 0, where the subgradient is one-sided
    x = np.where(np.abs(x) < 0.1, x + 0.3, x)
    return _check_layer(ReLU(), x, rng)


def check_pool(seed: int) -> float:
    rng = Rng(seed)
    x = rng.normal((2, 2, 4, 4), dtype=np.float64)
    return _check_layer(MaxPool2d(2, 2), x, rng)


def check_dropout_off(seed: int) -> float:
    rng = Rng(seed)
    x = rng.normal((3, 5), dtype=np.float64)
    return _check_layer(Dropout(0.0, rng), x, rng)


def check_linear(seed: int) -> float:
    rng = Rng(seed)
    layer = Linear("fc", 6, 4, rng, np.float64)
    x = rng.normal((3, 6), dtype=np.float64)
    return _check_layer(layer, x, rng)


def check_loss(seed: int) -> float:
    rng = Rng(seed)
    logits = rng.normal((4, 7), dtype=np.float64)
    labels = np.array([rng.randbelow(7) for _ in range(4)])
    _, dlogits = softmax_cross_entropy(logits, labels)

    def f():
        return softmax_cross_entropy(logits, labels)[0]

    return rel_error(dlogits, numeric_grad(f, logits))


def check_model(seed: int, config: ModelConfig | None = None) -> float:
    """FD over every parameter of the whole tiny network against the
    analytic gradients from one backward pass."""
    config = config or TINY_CONFIG
    rng = Rng(seed)
    model = build_model(config, rng, dtype=np.float64)
    c, h, w = config.input_shape
    x = rng.normal((2, c, h, w), dtype=np.float64)
    labels = np.array([rng.randbelow(config.num_classes) for _ in range(2)])

    model.set_mode("train")
    model.zero_grads()
    logits = model.forward(x)
    _, dlogits = softmax_cross_entropy(logits, labels)
    model.backward(dlogits)
    analytic = {name: slot.grad.copy() for name, slot in model.slots.items()}

    def f():
        return softmax_cross_entropy(model.forward(x), labels)[0]

    worst = 0.0
    for name, slot in model.slots.items():
        worst = max(worst, rel_error(analytic[name], numeric_grad(f, slot.value)))
    return worst


LAYER_CHECKS = {
    "conv": check_conv,
    "bn": check_bn,
    "relu": check_relu,
    "pool": check_pool,
    "dropout_off": check_dropout_off,
    "linear": check_linear,
    "loss": check_loss,
}


def gradient_check(seeds: int = 10, config: ModelConfig | None = None) -> dict[str, float]:
    """Max relative error per layer type plus the whole tiny model, over
    the given number of seeds."""
    report: dict[str, float] = {}
    for name, fn in LAYER_CHECKS.items():
        report[name] = max(fn(1000 + s) for s in range(seeds))
    report["model"] = max(check_model(2000 + s, config) for s in range(seeds))
    return report
