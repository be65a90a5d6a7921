"""Sparsifying transforms and the soft-thresholding prox.

Two kinds of transform share one calling convention (``t(x)`` maps a
``(C, M, N)`` array to another):

* :class:`ConvTransform`, the learnable conv-ReLU-conv block used for both the
  forward (NFT) and inverse (NIT) network transforms, and
* :class:`DctTransform`, the fixed orthonormal 3-D DCT used by the classical
  solver (its ``inverse`` attribute is the exact transpose).

Convolutions are 3x3 cross-correlations, stride 1, zero "same" padding and
no bias, so every transform maps zero to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft

KERNEL = 3


def soft_threshold(x, lam: float):
    """Elementwise ``sign(x) * max(|x| - lam, 0)``."""
    if lam < 0:
        raise ValueError(f"threshold must be nonnegative, got {lam}")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def _pad(x: np.ndarray) -> np.ndarray:
    pad = KERNEL // 2
    M, N = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (M + 2 * pad, N + 2 * pad), dtype=np.result_type(x, np.float64))
    out[..., pad:pad + M, pad:pad + N] = x
    return out


def _im2col(x: np.ndarray) -> np.ndarray:
    """``(..., C*9, M*N)`` columns of the zero-padded input, ``c``-major then offset."""
    M, N = x.shape[-2:]
    xp = _pad(x)
    cols = np.stack(
        [xp[..., i:i + M, j:j + N] for i in range(KERNEL) for j in range(KERNEL)], axis=-3
    )
    return cols.reshape(x.shape[:-3] + (x.shape[-3] * KERNEL * KERNEL, M * N))


def _lead_contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum over batch axes and last axis of a[..., i, p] * b[..., j, p]`` -> ``(i, j)``."""
    lead = tuple(range(a.ndim - 2))
    return np.tensordot(a, b, axes=(lead + (a.ndim - 1,), lead + (b.ndim - 1,)))


def conv2d(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Multi-channel 3x3 cross-correlation.

    Args:
        x: ``(..., C_in, M, N)`` input; leading axes are batch axes.
        weight: ``(C_out, C_in, 3, 3)`` kernel bank.

    Returns:
        ``(..., C_out, M, N)`` output with zero "same" padding.
    """
    if x.ndim < 3 or weight.ndim != 4 or weight.shape[1] != x.shape[-3]:
        raise ValueError(f"conv shape mismatch: input {x.shape}, kernel {weight.shape}")
    c_out, c_in = weight.shape[:2]
    M, N = x.shape[-2:]
    lead = x.shape[:-3]
    if c_in <= c_out:
        out = np.matmul(weight.reshape(c_out, -1), _im2col(x))
        return out.reshape(lead + (c_out, M, N))
    # few output channels: apply all 9 taps to the padded input once, then
    # sum the shifted tap responses (avoids copying 9 shifted inputs)
    xp = _pad(x)
    P = (M + 2) * (N + 2)
    taps = weight.transpose(2, 3, 0, 1).reshape(KERNEL * KERNEL * c_out, c_in)
    y = np.matmul(taps, xp.reshape(lead + (c_in, P)))
    y = y.reshape(lead + (KERNEL, KERNEL, c_out, M + 2, N + 2))
    out = np.zeros(lead + (c_out, M, N))
    for i in range(KERNEL):
        for j in range(KERNEL):
            out += y[..., i, j, :, i:i + M, j:j + N]
    return out


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Gradients of ``conv2d(x, weight)`` given the output gradient.

    Batch axes are summed into the kernel gradient.

    Returns:
        ``(grad_x, grad_weight)``.
    """
    c_out, c_in = weight.shape[:2]
    M, N = x.shape[-2:]
    lead = x.shape[:-3]
    if c_in <= c_out:
        g = grad_out.reshape(lead + (c_out, M * N))
        grad_w = _lead_contract(g, _im2col(x)).reshape(weight.shape)
    else:
        # place the output gradient at each tap offset on the padded grid
        gp = np.zeros(lead + (KERNEL, KERNEL, c_out, M + 2, N + 2))
        for i in range(KERNEL):
            for j in range(KERNEL):
                gp[..., i, j, :, i:i + M, j:j + N] = grad_out
        P = (M + 2) * (N + 2)
        gp = gp.reshape(lead + (KERNEL * KERNEL * c_out, P))
        xp = _pad(x).reshape(lead + (c_in, P))
        grad_w = _lead_contract(gp, xp).reshape(KERNEL, KERNEL, c_out, c_in).transpose(2, 3, 0, 1)
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x = conv2d(grad_out, flipped)
    return grad_x, np.ascontiguousarray(grad_w)


def xavier_uniform(rng: np.random.Generator, c_out: int, c_in: int) -> np.ndarray:
    fan_in = c_in * KERNEL * KERNEL
    fan_out = c_out * KERNEL * KERNEL
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(c_out, c_in, KERNEL, KERNEL))


@dataclass
class ConvTransform:
    """conv(3x3, L->F) -> ReLU -> conv(3x3, F->L).

    ``conv1`` is ``(F, L, 3, 3)`` and ``conv2`` is ``(L, F, 3, 3)``. The same
    structure serves as the forward transform and as its learned inverse.
    """

    conv1: np.ndarray
    conv2: np.ndarray

    def __post_init__(self):
        self.conv1 = np.asarray(self.conv1, dtype=np.float64)
        self.conv2 = np.asarray(self.conv2, dtype=np.float64)
        F, L = self.conv1.shape[:2]
        if self.conv1.shape != (F, L, KERNEL, KERNEL) or self.conv2.shape != (L, F, KERNEL, KERNEL):
            raise ValueError(
                f"inconsistent kernel shapes {self.conv1.shape} and {self.conv2.shape}"
            )
        if not (np.all(np.isfinite(self.conv1)) and np.all(np.isfinite(self.conv2))):
            raise ValueError("non-finite kernel values")

    @property
    def channels(self) -> int:
        return self.conv1.shape[1]

    @property
    def feature_maps(self) -> int:
        return self.conv1.shape[0]

    @property
    def n_params(self) -> int:
        return self.conv1.size + self.conv2.size

    @classmethod
    def xavier(cls, rng: np.random.Generator, channels: int, feature_maps: int) -> "ConvTransform":
        return cls(
            xavier_uniform(rng, feature_maps, channels),
            xavier_uniform(rng, channels, feature_maps),
        )

    @classmethod
    def delta(cls, channels: int, feature_maps: int) -> "ConvTransform":
        """Channel-copy delta kernels: identity on nonnegative inputs (needs F >= L)."""
        if feature_maps < channels:
            raise ValueError("delta transform needs feature_maps >= channels")
        c1 = np.zeros((feature_maps, channels, KERNEL, KERNEL))
        c2 = np.zeros((channels, feature_maps, KERNEL, KERNEL))
        for c in range(channels):
            c1[c, c, 1, 1] = 1.0
            c2[c, c, 1, 1] = 1.0
        return cls(c1, c2)

    def copy(self) -> "ConvTransform":
        return ConvTransform(self.conv1.copy(), self.conv2.copy())

    def forward(self, x: np.ndarray, cache: bool = False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 3 or x.shape[-3] != self.channels:
            raise ValueError(f"transform expects {self.channels} channels, got input {x.shape}")
        z = conv2d(x, self.conv1)
        a = np.maximum(z, 0.0)
        out = conv2d(a, self.conv2)
        if cache:
            return out, (x, z, a)
        return out

    __call__ = forward

    def backward(self, cache, grad_out: np.ndarray):
        """Returns ``(grad_x, grad_conv1, grad_conv2)``; ReLU'(0) is taken as 0."""
        x, z, a = cache
        grad_a, grad_c2 = conv2d_backward(a, self.conv2, grad_out)
        grad_z = grad_a * (z > 0)
        grad_x, grad_c1 = conv2d_backward(x, self.conv1, grad_z)
        return grad_x, grad_c1, grad_c2


def nft_forward(cube, params: ConvTransform) -> np.ndarray:
    """Network forward transform: image -> transform-domain features."""
    return params.forward(cube)


def nit_forward(features, params: ConvTransform) -> np.ndarray:
    """Network inverse transform: features -> image domain."""
    return params.forward(features)


def dct_transform(cube) -> np.ndarray:
    """Orthonormal separable 3-D DCT-II (2-D per band, 1-D across bands)."""
    return fft.dctn(np.asarray(cube, dtype=np.float64), type=2, norm="ortho")


def dct_inverse(features) -> np.ndarray:
    """Transpose (= inverse) of :func:`dct_transform`."""
    return fft.idctn(np.asarray(features, dtype=np.float64), type=2, norm="ortho")


class DctTransform:
    """Fixed orthonormal DCT as a transform object; ``inverse`` gives its transpose."""

    def __init__(self, inverse: bool = False):
        self.is_inverse = inverse

    @property
    def inverse(self) -> "DctTransform":
        return DctTransform(not self.is_inverse)

    def __call__(self, x):
        return dct_inverse(x) if self.is_inverse else dct_transform(x)

    def __repr__(self):
        return f"DctTransform(inverse={self.is_inverse})"
