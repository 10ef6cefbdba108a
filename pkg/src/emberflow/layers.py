"""Layers of the 3-conv-block network, each with a hand-written backward.

Every layer follows the same protocol: forward(x, train) saves whatever the
backward pass needs, backward(dy) returns dx and accumulates parameter
gradients into its ParamSlots (slots are zeroed by the caller at batch
start). All layers are dtype-preserving so the whole stack can run in
float64 for gradient verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (GeometryError, Rng, ShapeError, col2im_fold,
                     conv_out_size, im2col_fold)


class UsageError(RuntimeError):
    """backward called without a matching saved forward."""


@dataclass
class ParamSlot:
    name: str
    value: np.ndarray
    grad: np.ndarray

    @classmethod
    def new(cls, name: str, value: np.ndarray) -> "ParamSlot":
        return cls(name, value, np.zeros_like(value))


@dataclass
class ModelConfig:
    conv_channels: tuple[int, ...] = (64, 128, 256)
    kernel: int = 3
    conv_padding: int = 1
    pool_size: int = 2
    pool_stride: int = 2
    dropout_rate: float = 0.2
    hidden_units: int = 256
    num_classes: int = 7
    input_shape: tuple[int, int, int] = (1, 48, 48)

    def validate(self):
        if not self.conv_channels:
            raise ValueError("conv_channels must be nonempty")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def shape_trace(self) -> list[tuple[int, int, int]]:
        """[C,H,W] after the input and after each conv block."""
        self.validate()
        c, h, w = self.input_shape
        trace = [(c, h, w)]
        for cout in self.conv_channels:
            # conv keeps spatial size only if padding is chosen that way;
            # compute it honestly either way
            h = conv_out_size(h, self.kernel, 1, self.conv_padding)
            w = conv_out_size(w, self.kernel, 1, self.conv_padding)
            h = conv_out_size(h, self.pool_size, self.pool_stride, 0)
            w = conv_out_size(w, self.pool_size, self.pool_stride, 0)
            c = cout
            trace.append((c, h, w))
        return trace

    def flatten_size(self) -> int:
        c, h, w = self.shape_trace()[-1]
        return c * h * w

    def to_dict(self) -> dict:
        return {
            "conv_channels": list(self.conv_channels),
            "kernel": self.kernel,
            "conv_padding": self.conv_padding,
            "pool_size": self.pool_size,
            "pool_stride": self.pool_stride,
            "dropout_rate": self.dropout_rate,
            "hidden_units": self.hidden_units,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            conv_channels=tuple(d["conv_channels"]),
            kernel=int(d["kernel"]),
            conv_padding=int(d["conv_padding"]),
            pool_size=int(d["pool_size"]),
            pool_stride=int(d["pool_stride"]),
            dropout_rate=float(d["dropout_rate"]),
            hidden_units=int(d["hidden_units"]),
            num_classes=int(d["num_classes"]),
            input_shape=tuple(d["input_shape"]),
        )


class Layer:
    def params(self) -> list[ParamSlot]:
        return []

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """Cross-correlation (no kernel flip) + per-channel bias, via im2col+GEMM."""

    def __init__(self, name, cin, cout, k, stride, padding, rng: Rng, dtype):
        self.k, self.stride, self.padding = k, stride, padding
        self.cin, self.cout = cin, cout
        std = np.sqrt(2.0 / (cin * k * k))  # He-normal for ReLU nets
        w = rng.normal((cout, cin, k, k), 0.0, std, dtype=dtype)
        self.weight = ParamSlot.new(f"{name}/weight", w)
        self.bias = ParamSlot.new(f"{name}/bias", np.zeros(cout, dtype=dtype))
        self._saved = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train):
        B, C, H, W = x.shape
        if C != self.cin:
            raise ShapeError(f"expected {self.cin} input channels, got {C}")
        hout = conv_out_size(H, self.k, self.stride, self.padding)
        wout = conv_out_size(W, self.k, self.stride, self.padding)
        cols = im2col_fold(x, self.k, self.stride, self.padding)
        w2 = self.weight.value.reshape(self.cout, -1)
        y = np.matmul(w2, cols) + self.bias.value[:, None]
        self._saved = (cols, (B, C, H, W), (hout, wout))
        y = y.reshape(self.cout, B, hout, wout).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(y)

    def backward(self, dy):
        if self._saved is None:
            raise UsageError("Conv2d.backward before forward")
        cols, (B, C, H, W), (hout, wout) = self._saved
        dyf = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(self.cout, -1)
        self.weight.grad += (dyf @ cols.T).reshape(self.weight.value.shape)
        self.bias.grad += dyf.sum(axis=1)
        w2 = self.weight.value.reshape(self.cout, -1)
        dcols = w2.T @ dyf
        self._saved = None
        return col2im_fold(dcols, B, C, H, W, self.k, self.stride, self.padding)


class BatchNorm2d(Layer):
    """Per-channel batch normalization over (B, H, W).

    Train mode normalizes by the batch statistics (biased variance) and
    updates running stats with momentum 0.1; eval mode uses running stats.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, name, channels, dtype):
        self.gamma = ParamSlot.new(f"{name}/gamma", np.ones(channels, dtype=dtype))
        self.beta = ParamSlot.new(f"{name}/beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._saved = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, train):
        B, C, H, W = x.shape
        g = self.gamma.value[None, :, None, None]
        b = self.beta.value[None, :, None, None]
        if not train:
            inv = 1.0 / np.sqrt(self.running_var + self.EPS)
            xhat = (x - self.running_mean[None, :, None, None]) * inv[None, :, None, None]
            return g * xhat + b
        n = B * H * W
        if n < 2:
            raise ShapeError("batch norm needs >= 2 values per channel in train mode")
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = np.mean(xc * xc, axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + self.EPS)
        xc *= inv[None, :, None, None]
        xhat = xc
        m = self.MOMENTUM
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(x.dtype)
        self.running_var = ((1 - m) * self.running_var + m * var).astype(x.dtype)
        self._saved = (xhat, inv, n)
        y = xhat * g
        y += b
        return y

    def backward(self, dy):
        if self._saved is None:
            raise UsageError("BatchNorm2d.backward before train-mode forward")
        xhat, inv, n = self._saved
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        dxhat = dy * self.gamma.value[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
        self._saved = None
        return dx.astype(dy.dtype, copy=False)


class ReLU(Layer):
    # subgradient at exactly 0 is 0
    def __init__(self):
        self._mask = None

    def forward(self, x, train):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            raise UsageError("ReLU.backward before forward")
        dx = dy * self._mask
        self._mask = None
        return dx


class MaxPool2d(Layer):
    """Max pooling; backward routes each gradient to the first (row-major)
    maximal position within its window."""

    def __init__(self, size=2, stride=2):
        self.size, self.stride = size, stride
        self._saved = None

    def forward(self, x, train):
        B, C, H, W = x.shape
        k, s = self.size, self.stride
        hout = conv_out_size(H, k, s, 0)
        wout = conv_out_size(W, k, s, 0)
        if s == k:
            # non-overlapping windows: reduce over strided views, no copy
            y = x[:, :, 0::s, 0::s].copy()
            for ki in range(k):
                for kj in range(k):
                    if ki or kj:
                        np.maximum(y, x[:, :, ki::s, kj::s], out=y)
            self._saved = (x, y, (B, C, H, W)) if train else None
            return y
        sb, sc, sh, sw = x.strides
        win = np.lib.stride_tricks.as_strided(
            x, shape=(B, C, hout, wout, k, k),
            strides=(sb, sc, sh * s, sw * s, sh, sw),
        ).reshape(B, C, hout, wout, k * k)
        if not train:
            self._saved = None
            return win.max(axis=-1)
        arg = win.argmax(axis=-1)  # first max in row-major window order
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        self._saved = (arg, (B, C, H, W), (hout, wout))
        return y

    def backward(self, dy):
        if self._saved is None:
            raise UsageError("MaxPool2d.backward before train-mode forward")
        k, s = self.size, self.stride
        if s == k:
            x, y, (B, C, H, W) = self._saved
            self._saved = None
            # route each gradient to the first (row-major) max in its window
            dx = np.zeros_like(x)
            claimed = np.zeros(y.shape, dtype=bool)
            for ki in range(k):
                for kj in range(k):
                    hit = (x[:, :, ki::s, kj::s] == y) & ~claimed
                    dx[:, :, ki::s, kj::s] = dy * hit
                    claimed |= hit
            return dx
        arg, (B, C, H, W), (hout, wout) = self._saved
        self._saved = None
        # overlapping windows (stride < size) can hit the same input cell
        # from several windows; bincount sums contributions in index order
        oy = np.arange(hout)[None, None, :, None]
        ox = np.arange(wout)[None, None, None, :]
        iy = oy * s + arg // k
        ix = ox * s + arg % k
        bi = np.arange(B)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        flat = (((bi * C + ci) * H + iy) * W + ix).ravel()
        dx = np.bincount(flat, weights=dy.ravel().astype(np.float64),
                         minlength=B * C * H * W)
        return dx.astype(dy.dtype, copy=False).reshape(B, C, H, W)


class Dropout(Layer):
    """Inverted dropout: zero with probability rate at train time, scale
    survivors by 1/(1-rate); identity in eval mode."""

    def __init__(self, rate, rng: Rng):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate
        self.rng = rng
        self._scaled_mask = None

    def forward(self, x, train):
        if not train or self.rate == 0.0:
            self._scaled_mask = None
            return x
        # one raw word per element: drop iff word < rate * 2^64
        threshold = np.uint64(int(self.rate * 2.0 ** 64))
        keep = self.rng.raw(x.size) >= threshold
        mask = keep.astype(x.dtype).reshape(x.shape)
        mask *= 1.0 / (1.0 - self.rate)
        self._scaled_mask = mask
        return x * self._scaled_mask

    def backward(self, dy):
        if self._scaled_mask is None:
            return dy
        dx = dy * self._scaled_mask
        self._scaled_mask = None
        return dx


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        if self._shape is None:
            raise UsageError("Flatten.backward before forward")
        dx = dy.reshape(self._shape)
        self._shape = None
        return dx


class Linear(Layer):
    """y = x W + b with W of shape [n_in, n_out]."""

    def __init__(self, name, n_in, n_out, rng: Rng, dtype):
        std = np.sqrt(2.0 / n_in)
        w = rng.normal((n_in, n_out), 0.0, std, dtype=dtype)
        self.weight = ParamSlot.new(f"{name}/weight", w)
        self.bias = ParamSlot.new(f"{name}/bias", np.zeros(n_out, dtype=dtype))
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.weight.value.shape[0]:
            raise ShapeError(
                f"linear expects [B,{self.weight.value.shape[0]}], got {x.shape}")
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dy):
        if self._x is None:
            raise UsageError("Linear.backward before forward")
        self.weight.grad += self._x.T @ dy
        self.bias.grad += dy.sum(axis=0)
        dx = dy @ self.weight.value.T
        self._x = None
        return dx


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy over the batch.

    Returns (loss, dlogits) with dlogits = (softmax - onehot) / B.
    Stabilized by per-row max subtraction so huge logits stay finite.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B,C], got {logits.shape}")
    B, C = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise ShapeError(f"labels must be [{B}], got {labels.shape}")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"label out of range 0..{C - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = float(-logp[np.arange(B), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    return loss, dlogits.astype(logits.dtype)


class Model:
    """Ordered layer stack with a named parameter registry."""

    def __init__(self, config: ModelConfig, layers: list[Layer]):
        self.config = config
        self.layers = layers
        self.mode = "train"
        self.slots: dict[str, ParamSlot] = {}
        for layer in layers:
            for slot in layer.params():
                if slot.name in self.slots:
                    raise ValueError(f"duplicate parameter name {slot.name}")
                self.slots[slot.name] = slot
        self._forward_done = False

    def set_mode(self, mode: str):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode

    def zero_grads(self):
        for slot in self.slots.values():
            slot.grad[...] = 0

    def forward(self, x: np.ndarray) -> np.ndarray:
        train = self.mode == "train"
        for layer in self.layers:
            x = layer.forward(x, train)
        self._forward_done = True
        return x

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        if not self._forward_done:
            raise UsageError("Model.backward before forward")
        dy = dlogits
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        self._forward_done = False
        return dy

    def batchnorms(self) -> list[BatchNorm2d]:
        return [l for l in self.layers if isinstance(l, BatchNorm2d)]


def build_model(config: ModelConfig, rng: Rng, dropout_rng: Rng | None = None,
                dtype=np.float32) -> Model:
    """Assemble Conv->BN->ReLU->Pool->Dropout blocks, then Flatten ->
    Linear -> ReLU -> Linear. He-normal weights, zero biases, gamma=1,
    beta=0."""
    config.validate()
    trace = config.shape_trace()  # validates geometry up front
    if dropout_rng is None:
        dropout_rng = rng
    layers: list[Layer] = []
    cin = config.input_shape[0]
    for i, cout in enumerate(config.conv_channels, start=1):
        layers.append(Conv2d(f"conv{i}", cin, cout, config.kernel, 1,
                             config.conv_padding, rng, dtype))
        layers.append(BatchNorm2d(f"bn{i}", cout, dtype))
        layers.append(ReLU())
        layers.append(MaxPool2d(config.pool_size, config.pool_stride))
        layers.append(Dropout(config.dropout_rate, dropout_rng))
        cin = cout
    layers.append(Flatten())
    c, h, w = trace[-1]
    layers.append(Linear("fc1", c * h * w, config.hidden_units, rng, dtype))
    layers.append(ReLU())
    layers.append(Linear("fc2", config.hidden_units, config.num_classes, rng, dtype))
    return Model(config, layers)
