"""Sparse tensors, coordinate hashing and rulebook construction.

Coordinates are (z, y, x) integer triples. Every tensor keeps its rows
sorted lexicographically in that order, which doubles as the canonical
order for reductions and dumps.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

MISSING = -1


def linear_keys(coords: np.ndarray, shape) -> np.ndarray:
    """Row-major keys of (z, y, x) coords; monotone in lexicographic order."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    d, h, w = (int(s) for s in shape)
    return (c[:, 0] * h + c[:, 1]) * w + c[:, 2]


@dataclass
class SparseTensor:
    coords: np.ndarray
    features: np.ndarray
    spatial_shape: tuple
    stride: int = 1

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(len(self.coords), -1)
        self.spatial_shape = tuple(int(s) for s in self.spatial_shape)
        if len(self.features) != len(self.coords):
            raise ValueError(
                f"{len(self.features)} feature rows for {len(self.coords)} coordinates"
            )

    @property
    def num_active(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def replace_features(self, features: np.ndarray) -> "SparseTensor":
        return SparseTensor(self.coords, features, self.spatial_shape, self.stride)

    def validate(self) -> None:
        if len(self.coords) == 0:
            return
        if np.any(self.coords < 0) or np.any(self.coords >= np.array(self.spatial_shape)):
            raise ValueError("coordinates outside spatial_shape")
        keys = linear_keys(self.coords, self.spatial_shape)
        if np.any(np.diff(keys) <= 0):
            raise ValueError("coordinates must be unique and sorted by (z, y, x)")

    def dense(self) -> np.ndarray:
        """(D, H, W, C) volume with zeros at inactive sites."""
        out = np.zeros(self.spatial_shape + (self.channels,))
        out[tuple(self.coords.T)] = self.features
        return out

    @classmethod
    def from_unsorted(cls, coords, features, spatial_shape, stride: int = 1) -> "SparseTensor":
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        order = np.argsort(linear_keys(coords, spatial_shape), kind="stable")
        t = cls(coords[order], np.asarray(features)[order], spatial_shape, stride)
        t.validate()
        return t


class CoordIndex:
    """Coordinate -> row map backed by the tensor's sorted linear keys."""

    def __init__(self, coords: np.ndarray, spatial_shape):
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        self.spatial_shape = tuple(int(s) for s in spatial_shape)
        keys = linear_keys(self.coords, self.spatial_shape)
        order = np.argsort(keys, kind="stable")
        self._keys = keys[order]
        self._rows = order
        if np.any(np.diff(self._keys) == 0):
            raise ValueError("duplicate coordinates")

    def __len__(self) -> int:
        return len(self._keys)

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Vectorized lookup; MISSING for absent or out-of-grid coordinates."""
        q = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        out = np.full(len(q), MISSING, dtype=np.int64)
        if len(self._keys) == 0 or len(q) == 0:
            return out
        inside = np.all((q >= 0) & (q < np.array(self.spatial_shape)), axis=1)
        qk = linear_keys(q[inside], self.spatial_shape)
        pos = np.minimum(np.searchsorted(self._keys, qk), len(self._keys) - 1)
        hit = self._keys[pos] == qk
        out[np.flatnonzero(inside)[hit]] = self._rows[pos[hit]]
        return out

    def get(self, coord, default=None):
        row = int(self.lookup(np.asarray(coord).reshape(1, 3))[0])
        return default if row == MISSING else row

    def __getitem__(self, coord) -> int:
        row = self.get(coord)
        if row is None:
            raise KeyError(tuple(coord))
        return row

    def __contains__(self, coord) -> bool:
        return self.get(coord) is not None


def build_coord_index(t: SparseTensor) -> CoordIndex:
    return CoordIndex(t.coords, t.spatial_shape)


def kernel_offsets(k: int) -> np.ndarray:
    """All k^3 offsets (dz, dy, dx) in 0..k-1, canonical lexicographic order."""
    return np.array(list(itertools.product(range(k), repeat=3)), dtype=np.int64).reshape(-1, 3)


@dataclass
class Rulebook:
    """Gather/scatter pairs per kernel offset.

    ``pairs[k]`` is a ``(in_rows, out_rows)`` tuple for the k-th offset of
    :func:`kernel_offsets`, sorted by output row then input row.
    """

    kernel_size: int
    pairs: list
    out_coords: np.ndarray
    out_shape: tuple
    out_stride: int
    num_inputs: int
    kind: str = "subm"

    @property
    def num_outputs(self) -> int:
        return len(self.out_coords)

    @property
    def num_pairs(self) -> int:
        return sum(len(i) for i, _ in self.pairs)

    def pair_set(self) -> set:
        return {
            (k, int(i), int(o))
            for k, (ins, outs) in enumerate(self.pairs)
            for i, o in zip(ins, outs)
        }

    def transpose(self, kind: str, out_coords, out_shape, out_stride) -> "Rulebook":
        pairs = []
        for ins, outs in self.pairs:
            order = np.lexsort((outs, ins))
            pairs.append((outs[order], ins[order]))
        return Rulebook(
            self.kernel_size, pairs, np.asarray(out_coords), tuple(out_shape), out_stride,
            self.num_outputs, kind,
        )


def _sorted_pairs(ins: np.ndarray, outs: np.ndarray) -> tuple:
    order = np.lexsort((ins, outs))
    return ins[order].astype(np.int64), outs[order].astype(np.int64)


def build_submanifold_rulebook(t: SparseTensor, kernel: int = 3) -> Rulebook:
    if kernel % 2 != 1:
        raise ValueError("submanifold kernel size must be odd")
    index = build_coord_index(t)
    center = kernel // 2
    rows = np.arange(t.num_active, dtype=np.int64)
    pairs = []
    for delta in kernel_offsets(kernel):
        src = index.lookup(t.coords + (delta - center))
        hit = src != MISSING
        pairs.append(_sorted_pairs(src[hit], rows[hit]))
    return Rulebook(kernel, pairs, t.coords.copy(), t.spatial_shape, t.stride, t.num_active, "subm")


def strided_output_shape(shape, kernel: int = 3, stride: int = 2, padding: int = 1) -> tuple:
    return tuple((int(n) + 2 * padding - kernel) // stride + 1 for n in shape)


def build_strided_rulebook(t: SparseTensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Rulebook:
    """Rulebook of a strided sparse convolution.

    An output site o is active iff some active input i satisfies
    ``i = stride * o + delta - padding`` for an offset delta of the kernel.
    """
    out_shape = strided_output_shape(t.spatial_shape, kernel, stride, padding)
    limit = np.array(out_shape)
    rows = np.arange(t.num_active, dtype=np.int64)
    cand = []
    for delta in kernel_offsets(kernel):
        num = t.coords + padding - delta
        ok = np.all((num % stride == 0) & (num >= 0), axis=1)
        o = num // stride
        ok &= np.all(o < limit, axis=1)
        cand.append((rows[ok], o[ok]))
    all_out = np.concatenate([o for _, o in cand]) if cand else np.zeros((0, 3), np.int64)
    keys = np.unique(linear_keys(all_out, out_shape))
    d, h, w = out_shape
    out_coords = np.stack([keys // (h * w), (keys // w) % h, keys % w], axis=1).astype(np.int64)
    pairs = []
    for ins, o in cand:
        outs = np.searchsorted(keys, linear_keys(o, out_shape))
        pairs.append(_sorted_pairs(ins, outs))
    return Rulebook(
        kernel, pairs, out_coords, out_shape, t.stride * stride, t.num_active, "strided"
    )


@dataclass
class ScaleEntry:
    coords: np.ndarray
    index: CoordIndex
    spatial_shape: tuple


@dataclass
class KeyIndexCache:
    """Per-scale coordinate sets and rulebooks shared by encoder and decoder.

    Keys are tensor strides (1, 2, 4, 8).
    """

    scales: dict = field(default_factory=dict)
    submanifold: dict = field(default_factory=dict)
    strided: dict = field(default_factory=dict)

    def record(self, t: SparseTensor) -> None:
        self.scales[t.stride] = ScaleEntry(t.coords.copy(), build_coord_index(t), t.spatial_shape)

    def entry(self, stride: int) -> ScaleEntry:
        try:
            return self.scales[stride]
        except KeyError:
            raise KeyError(f"no cached coordinates for stride {stride}") from None

    def submanifold_rulebook(self, t: SparseTensor, kernel: int = 3) -> Rulebook:
        key = (t.stride, kernel)
        rb = self.submanifold.get(key)
        if rb is None or not np.array_equal(rb.out_coords, t.coords):
            rb = build_submanifold_rulebook(t, kernel)
            self.submanifold[key] = rb
        return rb

    def strided_rulebook(self, t: SparseTensor) -> Rulebook:
        rb = build_strided_rulebook(t)
        self.strided[t.stride] = rb
        return rb


def build_inverse_rulebook(low: SparseTensor, cache: KeyIndexCache, target_stride: int | None = None) -> Rulebook:
    """Transposed rulebook restoring the cached coordinates at ``target_stride``.

    Reuses the encoder's strided rulebook when ``low`` still has the coarse
    coordinate set it produced; otherwise the pairs are rebuilt by lookup.
    """
    if target_stride is None:
        target_stride = low.stride // 2
    target = cache.entry(target_stride)
    fwd = cache.strided.get(target_stride)
    if fwd is not None and np.array_equal(fwd.out_coords, low.coords):
        return fwd.transpose("inverse", target.coords, target.spatial_shape, target_stride)
    fine = SparseTensor(target.coords, np.zeros((len(target.coords), 0)), target.spatial_shape, target_stride)
    fwd = build_strided_rulebook(fine)
    if fwd.out_shape != low.spatial_shape:
        raise ValueError("low-resolution tensor does not match the cached scale")
    # map the recomputed coarse rows onto low's rows
    remap = build_coord_index(low).lookup(fwd.out_coords)
    pairs = []
    for ins, outs in fwd.pairs:
        src = remap[outs]
        hit = src != MISSING
        order = np.lexsort((src[hit], ins[hit]))
        pairs.append((src[hit][order], ins[hit][order]))
    return Rulebook(
        fwd.kernel_size, pairs, target.coords.copy(), target.spatial_shape, target_stride,
        low.num_active, "inverse",
    )


def dump_tensor(t: SparseTensor, fmt: str = "%.9g") -> str:
    """Text dump, one ``z y x | f0 f1 ...`` line per active site in canonical order."""
    lines = []
    for c, f in zip(t.coords, t.features):
        feats = " ".join(fmt % v for v in f)
        lines.append(f"{c[0]} {c[1]} {c[2]} | {feats}".rstrip())
    return "\n".join(lines) + ("\n" if lines else "")


def parse_tensor_dump(text: str, spatial_shape, stride: int = 1) -> SparseTensor:
    coords, feats = [], []
    for line in text.splitlines():
        if not line.strip():
            continue
        left, _, right = line.partition("|")
        coords.append([int(v) for v in left.split()])
        feats.append([float(v) for v in right.split()])
    width = len(feats[0]) if feats else 0
    return SparseTensor(np.array(coords, dtype=np.int64).reshape(-1, 3),
                        np.array(feats).reshape(len(coords), width), spatial_shape, stride)
