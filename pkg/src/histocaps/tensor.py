"""Dense numeric kernels with explicit backward passes.

Tensors are plain :class:`numpy.ndarray` values (row-major, float32 or
float64).  Every kernel here is a pure function; backward functions take
the forward inputs plus the upstream gradient and return gradients for each
differentiable argument.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PRECISIONS = {"single": np.float32, "double": np.float64}


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


def dtype_of(precision: str) -> type:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected 'single' or 'double'") from None


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64 seeded through SeedSequence)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def derive_seed(seed: int, *keys: int | str) -> int:
    """Derive an independent 64-bit sub-seed from a global seed and keys.

    String keys are reduced with CRC-32 so the result does not depend on
    Python's per-process string hashing.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        entropy.append(zlib.crc32(key.encode("utf-8")) if isinstance(key, str) else int(key))
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def alloc(
    shape: Sequence[int],
    init: str = "zeros",
    *,
    value: float = 0.0,
    low: float = 0.0,
    high: float = 1.0,
    mean: float = 0.0,
    std: float = 1.0,
    rng: np.random.Generator | None = None,
    precision: str = "single",
) -> np.ndarray:
    """Allocate a tensor filled by ``init``: zeros, constant, uniform or normal."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ValueError(f"shape must be non-empty with positive extents, got {shape}")
    dtype = dtype_of(precision)
    if init == "zeros":
        return np.zeros(shape, dtype=dtype)
    if init == "constant":
        return np.full(shape, value, dtype=dtype)
    if rng is None:
        raise ValueError(f"init {init!r} requires an rng")
    if init == "uniform":
        return rng.uniform(low, high, size=shape).astype(dtype)
    if init == "normal":
        return rng.normal(mean, std, size=shape).astype(dtype)
    raise ValueError(f"unknown init {init!r}")


@dataclass(frozen=True)
class ConvSpec:
    in_maps: int
    out_maps: int
    kernel: int
    stride: int = 1

    def __post_init__(self):
        if self.in_maps < 1 or self.out_maps < 1:
            raise ValueError("map counts must be positive")
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be >= 1")

    def output_size(self, size: int) -> int:
        return conv_output_size(size, self.kernel, self.stride)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_maps, self.in_maps, self.kernel, self.kernel)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    """Valid-convolution extent: floor((size - kernel) / stride) + 1."""
    if kernel > size:
        raise ValueError(f"kernel {kernel} larger than input extent {size}")
    return (size - kernel) // stride + 1


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [B,C,H,W] input, got shape {x.shape}")


def _windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # [B, C, H', W', k, k] strided view, no copy
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _check_conv(x: np.ndarray, spec: ConvSpec, weights: np.ndarray) -> None:
    if x.shape[1] != spec.in_maps:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_maps}")
    if weights.shape != spec.weight_shape:
        raise ValueError(f"weights shape {weights.shape} != {spec.weight_shape}")
    h, w = x.shape[2:]
    if spec.kernel > h or spec.kernel > w:
        raise ValueError(f"kernel {spec.kernel} larger than input {h}x{w}")


def conv2d(x: np.ndarray, spec: ConvSpec, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid strided cross-correlation.

    ``x`` is ``[C,H,W]`` or batched ``[B,C,H,W]``; the output keeps the same
    batching with ``out_maps`` channels.
    """
    xb, single = _as_batch(x)
    _check_conv(xb, spec, weights)
    if bias.shape != (spec.out_maps,):
        raise ValueError(f"bias shape {bias.shape} != ({spec.out_maps},)")
    cols = _windows(xb, spec.kernel, spec.stride)
    out = np.tensordot(cols, weights, axes=([1, 4, 5], [1, 2, 3]))  # [B, H', W', K]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias[None, :, None, None]
    check_finite(out, "conv2d output")
    return out[0] if single else out


def conv2d_backward(
    x: np.ndarray, spec: ConvSpec, weights: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dweights, dbias) of a ``conv2d`` call given ``dout``."""
    xb, single = _as_batch(x)
    db_out, _ = _as_batch(dout)
    _check_conv(xb, spec, weights)
    k, s = spec.kernel, spec.stride
    ho, wo = db_out.shape[2:]
    cols = _windows(xb, k, s)
    dw = np.tensordot(db_out, cols, axes=([0, 2, 3], [0, 2, 3]))  # [K, C, k, k]
    db = db_out.sum(axis=(0, 2, 3))
    dcols = np.tensordot(db_out, weights, axes=([1], [0]))  # [B, H', W', C, k, k]
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # [B, C, k, k, H', W']
    dx = np.zeros_like(xb)
    for dy in range(k):
        for dxi in range(k):
            dx[:, :, dy : dy + s * (ho - 1) + 1 : s, dxi : dxi + s * (wo - 1) + 1 : s] += dcols[:, :, dy, dxi]
    return (dx[0] if single else dx), dw.astype(weights.dtype, copy=False), db.astype(weights.dtype, copy=False)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dout, 0).astype(dout.dtype, copy=False)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    check_finite(x, "softmax input")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient w.r.t. softmax input, given its output ``y``."""
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def linear_map(u: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Matrix-vector product ``W @ u`` with W shaped ``[d_out, d_in]``."""
    if W.ndim != 2 or u.shape[-1] != W.shape[1]:
        raise ValueError(f"cannot map vector of size {u.shape[-1]} through matrix {W.shape}")
    return check_finite(u @ W.T, "linear_map output")


def linear_map_backward(u: np.ndarray, W: np.ndarray, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (du, dW)."""
    du = dout @ W
    dW = np.outer(dout, u) if u.ndim == 1 else np.einsum("...o,...i->oi", dout, u)
    return du, dW
