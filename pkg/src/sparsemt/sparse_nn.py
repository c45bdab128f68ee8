"""Sparse convolution kernels, block internals and the dense reference convolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse_core import Rulebook, SparseTensor, kernel_offsets


@dataclass
class ConvWeights:
    weight: np.ndarray  # (k^3, C_in, C_out), offsets in kernel_offsets() order
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 3:
            raise ValueError("conv weight must have shape (k^3, C_in, C_out)")
        k = round(self.weight.shape[0] ** (1 / 3))
        if k ** 3 != self.weight.shape[0] or k % 2 != 1:
            raise ValueError(f"kernel volume {self.weight.shape[0]} is not an odd cube")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)

    @property
    def kernel_size(self) -> int:
        return round(self.weight.shape[0] ** (1 / 3))

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[2]


@dataclass
class NormParams:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    @classmethod
    def identity(cls, channels: int) -> "NormParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))


def _apply_rulebook(features: np.ndarray, rb: Rulebook, w: ConvWeights) -> np.ndarray:
    if w.kernel_size != rb.kernel_size:
        raise ValueError(f"kernel size {w.kernel_size} does not match rulebook {rb.kernel_size}")
    if features.shape[1] != w.c_in:
        raise ValueError(f"input has {features.shape[1]} channels, weights expect {w.c_in}")
    if len(features) != rb.num_inputs:
        raise ValueError("rulebook was built for a different input tensor")
    out = np.zeros((rb.num_outputs, w.c_out))
    if w.bias is not None:
        out += w.bias
    for k, (ins, outs) in enumerate(rb.pairs):
        if len(ins):
            # outs are unique within one offset, so fancy-index += is exact
            out[outs] += features[ins] @ w.weight[k]
    return out


def submanifold_conv3d(t: SparseTensor, rb: Rulebook, w: ConvWeights) -> SparseTensor:
    if rb.kind != "subm" or rb.num_outputs != t.num_active:
        raise ValueError("submanifold_conv3d needs a submanifold rulebook of this tensor")
    return t.replace_features(_apply_rulebook(t.features, rb, w))


def sparse_conv3d(t: SparseTensor, rb: Rulebook, w: ConvWeights) -> SparseTensor:
    feats = _apply_rulebook(t.features, rb, w)
    return SparseTensor(rb.out_coords, feats, rb.out_shape, rb.out_stride)


def inverse_sparse_conv3d(t: SparseTensor, rb: Rulebook, w: ConvWeights) -> SparseTensor:
    """Transposed convolution onto the cached coordinates the rulebook targets."""
    if rb.kind != "inverse":
        raise ValueError("inverse_sparse_conv3d needs an inverse rulebook")
    feats = _apply_rulebook(t.features, rb, w)
    return SparseTensor(rb.out_coords, feats, rb.out_shape, rb.out_stride)


def norm_relu(t: SparseTensor, p: NormParams, relu: bool = True) -> SparseTensor:
    x = (t.features - p.running_mean) / np.sqrt(p.running_var + p.eps) * p.scale + p.shift
    return t.replace_features(np.maximum(x, 0.0) if relu else x)


def resblock(t: SparseTensor, rb: Rulebook, conv1: ConvWeights, norm1: NormParams,
             conv2: ConvWeights, norm2: NormParams) -> SparseTensor:
    """relu(norm2(conv2(relu(norm1(conv1(t))))) + t)."""
    h = norm_relu(submanifold_conv3d(t, rb, conv1), norm1)
    h = norm_relu(submanifold_conv3d(h, rb, conv2), norm2, relu=False)
    return t.replace_features(np.maximum(h.features + t.features, 0.0))


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    out = np.asarray(x, dtype=np.float64) @ w
    return out + b if b is not None else out


# -- dense references --------------------------------------------------------


def dense_conv3d_oracle(volume: np.ndarray, w: ConvWeights, stride: int = 1, padding: int = 1) -> np.ndarray:
    """Plain zero-padded 3D cross-correlation on a (D, H, W, C_in) volume.

    out[o] = bias + sum_delta volume[stride * o + delta - padding] @ W[delta]
    """
    k = w.kernel_size
    d, h, wd, _ = volume.shape
    out_shape = [(n + 2 * padding - k) // stride + 1 for n in (d, h, wd)]
    pad = np.pad(volume, ((padding, padding),) * 3 + ((0, 0),))
    out = np.zeros(out_shape + [w.c_out])
    if w.bias is not None:
        out += w.bias
    for idx, (dz, dy, dx) in enumerate(kernel_offsets(k)):
        window = pad[
            dz: dz + stride * (out_shape[0] - 1) + 1: stride,
            dy: dy + stride * (out_shape[1] - 1) + 1: stride,
            dx: dx + stride * (out_shape[2] - 1) + 1: stride,
        ]
        for z in range(out_shape[0]):
            out[z] += window[z] @ w.weight[idx]
    return out


def dense_conv_transpose3d_oracle(volume: np.ndarray, w: ConvWeights, out_shape, stride: int = 2,
                                  padding: int = 1) -> np.ndarray:
    """Adjoint of :func:`dense_conv3d_oracle`: scatter each input site through the kernel."""
    k = w.kernel_size
    d, h, wd, _ = volume.shape
    big = [stride * (n - 1) + k for n in (d, h, wd)]
    acc = np.zeros([max(b, o + padding) for b, o in zip(big, out_shape)] + [w.c_out])
    for idx, (dz, dy, dx) in enumerate(kernel_offsets(k)):
        contrib = volume @ w.weight[idx]
        acc[dz: dz + stride * (d - 1) + 1: stride,
            dy: dy + stride * (h - 1) + 1: stride,
            dx: dx + stride * (wd - 1) + 1: stride] += contrib
    out = acc[padding: padding + out_shape[0], padding: padding + out_shape[1],
              padding: padding + out_shape[2]].copy()
    if w.bias is not None:
        out += w.bias
    return out
