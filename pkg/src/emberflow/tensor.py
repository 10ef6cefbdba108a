"""Dense tensor kernels: creation, GEMM, im2col/col2im, reductions, RNG.

Tensors are plain numpy ndarrays in row-major (C) order. float32 is the
training dtype; float64 is selectable for gradient verification, where
single precision is too coarse for finite differences.

Determinism: all kernels are deterministic for a fixed input on a fixed
platform. matmul delegates to the BLAS bound into numpy, which computes
each output element with a fixed per-element accumulation order and is
reproducible run to run on the same machine/thread configuration.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when tensor extents are invalid or do not agree."""


class GeometryError(ValueError):
    """Raised when a convolution/pooling geometry does not divide evenly."""


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = float(2.0 ** -53)


class Rng:
    """Counter-based splitmix64 generator.

    Output word i (1-based) is mix64(seed + i * golden_gamma), so the raw
    integer stream depends only on (seed, counter) and is identical on any
    platform. State is two integers, which makes checkpointing trivial.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = int(counter)

    def state(self) -> tuple[int, int]:
        return (int(self.seed), self.counter)

    @classmethod
    def from_state(cls, state) -> "Rng":
        seed, counter = state
        return cls(int(seed), int(counter))

    def raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 words."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = self.seed + idx * _GOLDEN
            z = (z ^ (z >> _S30)) * _MIX1
            z = (z ^ (z >> _S27)) * _MIX2
            z = z ^ (z >> _S31)
        return z

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0,
                dtype=np.float32) -> np.ndarray:
        """Uniform samples in [low, high)."""
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> _S11).astype(np.float64) * _INV53
        out = (low + u * (high - low)).astype(dtype)
        return out.reshape(shape) if shape else out[0]

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0,
               dtype=np.float32) -> np.ndarray:
        """Gaussian samples via Box-Muller on consecutive word pairs."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        w = self.raw(2 * m)
        # u1 in (0, 1] so log() is finite; u2 in [0, 1)
        u1 = ((w[:m] >> _S11).astype(np.float64) + 1.0) * _INV53
        u2 = (w[m:] >> _S11).astype(np.float64) * _INV53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = (mean + std * z).astype(dtype)
        return out.reshape(shape) if shape else out[0]

    def randbelow(self, bound: int) -> int:
        """One integer in [0, bound). Modulo reduction; the ~2**-64 bias is
        irrelevant for shuffling and keeps the stream platform-exact."""
        if bound < 1:
            raise ValueError(f"bound must be >= 1, got {bound}")
        return int(self.raw(1)[0] % np.uint64(bound))

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n), one word per swap."""
        perm = np.arange(n)
        if n < 2:
            return perm
        words = self.raw(n - 1)
        for t, i in enumerate(range(n - 1, 0, -1)):
            j = int(words[t] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


# ---------------------------------------------------------------------------
# Creation
# ---------------------------------------------------------------------------

def _check_shape(shape):
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def create(shape, fill: str = "zero", *, value: float = 0.0,
           low: float = 0.0, high: float = 1.0,
           mean: float = 0.0, std: float = 1.0,
           rng: Rng | None = None, dtype=np.float32) -> np.ndarray:
    """Create a tensor: fill is 'zero', 'constant', 'uniform' or 'normal'.

    Random fills consume the provided Rng deterministically.
    """
    shape = _check_shape(shape)
    if fill == "zero":
        return np.zeros(shape, dtype=dtype)
    if fill == "constant":
        return np.full(shape, value, dtype=dtype)
    if fill == "uniform":
        if rng is None:
            raise ValueError("uniform fill requires an Rng")
        return rng.uniform(shape, low, high, dtype=dtype)
    if fill == "normal":
        if rng is None:
            raise ValueError("normal fill requires an Rng")
        return rng.normal(shape, mean, std, dtype=dtype)
    raise ValueError(f"unknown fill {fill!r}")


# ---------------------------------------------------------------------------
# GEMM
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """C[i,j] = sum_p A[i,p] * B[p,j] for 2-D operands."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents disagree: {a.shape} x {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------

def conv_out_size(extent: int, k: int, stride: int, padding: int) -> int:
    span = extent + 2 * padding - k
    if span < 0:
        raise GeometryError(f"kernel {k} exceeds padded extent {extent + 2 * padding}")
    if span % stride != 0:
        raise GeometryError(
            f"geometry does not divide: extent={extent} k={k} stride={stride} "
            f"padding={padding}")
    return span // stride + 1


def im2col_batch(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """[B,C,H,W] -> [B, C*k*k, Hout*Wout].

    Column j holds the receptive field of output position j (row-major over
    output positions), channel-major then row-major within the patch.
    Padded positions read as zero.
    """
    B, C, H, W = x.shape
    hout = conv_out_size(H, k, stride, padding)
    wout = conv_out_size(W, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sb, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(B, C, k, k, hout, wout),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
    )
    return windows.reshape(B, C * k * k, hout * wout)


def im2col_fold(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """[B,C,H,W] -> [C*k*k, B*Hout*Wout]: per-image im2col matrices
    concatenated horizontally (image-major column order). One big GEMM
    over this layout is much faster than B small ones."""
    B, C, H, W = x.shape
    hout = conv_out_size(H, k, stride, padding)
    wout = conv_out_size(W, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sb, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(C, k, k, B, hout, wout),
        strides=(sc, sh, sw, sb, sh * stride, sw * stride),
    )
    return windows.reshape(C * k * k, B * hout * wout)


def col2im_fold(cols: np.ndarray, B: int, C: int, H: int, W: int,
                k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of im2col_fold; returns [B,C,H,W] with overlaps summed."""
    hout = conv_out_size(H, k, stride, padding)
    wout = conv_out_size(W, k, stride, padding)
    if cols.shape != (C * k * k, B * hout * wout):
        raise ShapeError(
            f"cols shape {cols.shape} != ({C * k * k}, {B * hout * wout})")
    r = cols.reshape(C, k, k, B, hout, wout)
    hp, wp = H + 2 * padding, W + 2 * padding
    out = np.zeros((C, B, hp, wp), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * hout:stride,
                kj:kj + stride * wout:stride] += r[:, ki, kj]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def im2col(x: np.ndarray, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """[C,H,W] -> [C*k*k, Hout*Wout]; see im2col_batch."""
    if x.ndim != 3:
        raise ShapeError(f"im2col expects [C,H,W], got {x.shape}")
    return im2col_batch(x[None], k, stride, padding)[0]


def col2im_batch(cols: np.ndarray, C: int, H: int, W: int,
                 k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of im2col_batch: overlapping contributions are summed,
    padding contributions discarded."""
    B = cols.shape[0]
    hout = conv_out_size(H, k, stride, padding)
    wout = conv_out_size(W, k, stride, padding)
    if cols.shape[1:] != (C * k * k, hout * wout):
        raise ShapeError(
            f"cols shape {cols.shape[1:]} != ({C * k * k}, {hout * wout})")
    r = cols.reshape(B, C, k, k, hout, wout)
    hp, wp = H + 2 * padding, W + 2 * padding
    out = np.zeros((B, C, hp, wp), dtype=cols.dtype)
    # fixed (ki, kj) loop order => deterministic accumulation
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * hout:stride,
                kj:kj + stride * wout:stride] += r[:, :, ki, kj]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def col2im(cols: np.ndarray, C: int, H: int, W: int,
           k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    if cols.ndim != 2:
        raise ShapeError(f"col2im expects 2-D cols, got {cols.shape}")
    return col2im_batch(cols[None], C, H, W, k, stride, padding)[0]


# ---------------------------------------------------------------------------
# Reductions and elementwise ops
# ---------------------------------------------------------------------------

def reduce(t: np.ndarray, op: str, axis: int) -> np.ndarray:
    """sum | mean | max | argmax along one axis. argmax ties break toward
    the lowest index."""
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {t.shape}")
    if t.shape[axis] == 0:
        raise ShapeError("cannot reduce over an empty axis")
    if op == "sum":
        return t.sum(axis=axis)
    if op == "mean":
        return t.mean(axis=axis)
    if op == "max":
        return t.max(axis=axis)
    if op == "argmax":
        return t.argmax(axis=axis)
    raise ValueError(f"unknown reduce op {op!r}")


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b):
    _check_same_shape(a, b)
    return a + b


def sub(a, b):
    _check_same_shape(a, b)
    return a - b


def mul(a, b):
    _check_same_shape(a, b)
    return a * b


def scale(a, c):
    return a * c


def exp(a):
    return np.exp(a)


def log(a):
    return np.log(a)


def maximum0(a):
    """max(x, 0) elementwise, i.e. ReLU."""
    return np.maximum(a, 0)


def greater_mask(a, b):
    _check_same_shape(a, b)
    return (a > b).astype(a.dtype)


def add_rowvec(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    """[B,n] + [n]: the one sanctioned broadcast, for bias rows."""
    if a.ndim != 2 or v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ShapeError(f"row-vector broadcast needs [B,n]+[n], got {a.shape}+{v.shape}")
    return a + v
