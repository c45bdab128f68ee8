"""Dense 2D operators on (C, H, W) maps: convolution, pooling, bilinear upsampling."""

from __future__ import annotations

import numpy as np


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Stride-1 'same' convolution. ``w`` has shape (k*k, C_in, C_out)."""
    k = int(round(np.sqrt(w.shape[0])))
    c, h, wd = x.shape
    if w.shape[1] != c:
        raise ValueError(f"input has {c} channels, weights expect {w.shape[1]}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    out = np.zeros((w.shape[2], h * wd))
    for idx in range(k * k):
        dy, dx = divmod(idx, k)
        patch = xp[:, dy: dy + h, dx: dx + wd].reshape(c, -1)
        out += w[idx].T @ patch
    if b is not None:
        out += np.asarray(b).reshape(-1, 1)
    return out.reshape(-1, h, wd)


def conv2d_oracle(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel loop reference for :func:`conv2d`."""
    k = int(round(np.sqrt(w.shape[0])))
    c, h, wd = x.shape
    p = k // 2
    out = np.zeros((w.shape[2], h, wd))
    for y in range(h):
        for xx in range(wd):
            acc = np.zeros(w.shape[2]) if b is None else np.array(b, dtype=float).copy()
            for idx in range(k * k):
                dy, dx = divmod(idx, k)
                sy, sx = y + dy - p, xx + dx - p
                if 0 <= sy < h and 0 <= sx < wd:
                    acc += x[:, sy, sx] @ w[idx]
            out[:, y, xx] = acc
    return out


def avg_pool2x(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling, stride 2; odd extents are edge-padded on the high side."""
    _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, h % 2), (0, w % 2)), mode="edge")
    c, hp, wp = xp.shape
    return xp.reshape(c, hp // 2, 2, wp // 2, 2).mean(axis=(2, 4))


def _lerp_axis(x: np.ndarray, axis: int, out_len: int) -> np.ndarray:
    n = x.shape[axis]
    src = (np.arange(out_len) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    shape = [1] * x.ndim
    shape[axis] = out_len
    frac = frac.reshape(shape)
    return np.take(x, i0, axis=axis) * (1 - frac) + np.take(x, i1, axis=axis) * frac


def upsample_bilinear2x(x: np.ndarray, out_hw: tuple | None = None) -> np.ndarray:
    """Half-pixel-centred bilinear x2 upsampling, cropped to ``out_hw``."""
    _, h, w = x.shape
    oh, ow = out_hw if out_hw is not None else (2 * h, 2 * w)
    y = _lerp_axis(x, 1, 2 * h)[:, :oh]
    return _lerp_axis(y, 2, 2 * w)[:, :, :ow]


def bilinear_sample(fmap: np.ndarray, u: float, v: float) -> np.ndarray:
    """Sample a (C, H, W) map at column ``u``, row ``v``; outside cells read as zero."""
    c, h, w = fmap.shape
    x0, y0 = int(np.floor(u)), int(np.floor(v))
    fx, fy = u - x0, v - y0
    out = np.zeros(c)
    for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
            if wy * wx != 0 and 0 <= yy < h and 0 <= xx < w:
                out += wy * wx * fmap[:, yy, xx]
    return out
