"""Named tensor store, its binary container format, and seeded initialization."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

_MAGIC = b"LMNW"
_VERSION = 1


class WeightFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class WeightStore:
    """Ordered name -> float32 tensor map.

    Reads go through ``__getitem__``, which returns a float64 view of the
    stored values and records the name so tests can detect orphan tensors.
    """

    def __init__(self, tensors=None):
        self._data: OrderedDict[str, np.ndarray] = OrderedDict()
        self._cache: dict[str, np.ndarray] = {}
        self.accessed: set[str] = set()
        for name, value in (tensors or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        self._data[name] = np.ascontiguousarray(value, dtype=np.float32)
        self._cache.pop(name, None)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            raw = self._data[name]
        except KeyError:
            raise KeyError(f"missing weight tensor {name!r}") from None
        self.accessed.add(name)
        arr = self._cache.get(name)
        if arr is None:
            arr = raw.astype(np.float64)
            arr.flags.writeable = False
            self._cache[name] = arr
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __len__(self) -> int:
        return len(self._data)

    def __iter__(self):
        return iter(self._data)

    def names(self) -> list:
        return list(self._data)

    def raw(self, name: str) -> np.ndarray:
        return self._data[name]

    def shapes(self) -> OrderedDict:
        return OrderedDict((k, v.shape) for k, v in self._data.items())

    def reset_access(self) -> None:
        self.accessed.clear()

    def unused(self) -> list:
        return [n for n in self._data if n not in self.accessed]

    def equals(self, other: "WeightStore") -> bool:
        if self.names() != other.names():
            return False
        return all(
            self._data[n].shape == other._data[n].shape
            and self._data[n].tobytes() == other._data[n].tobytes()
            for n in self._data
        )


def encode_weights(store: WeightStore) -> bytes:
    out = [struct.pack("<4sII", _MAGIC, _VERSION, len(store))]
    for name in store:
        arr = store.raw(name)
        enc = name.encode("utf-8")
        out.append(struct.pack("<I", len(enc)) + enc)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    return b"".join(out)


def decode_weights(buf: bytes) -> WeightStore:
    def need(n, at, what):
        if len(buf) < at + n:
            raise WeightFormatError(f"truncated {what}", len(buf))

    need(12, 0, "header")
    magic, version, count = struct.unpack_from("<4sII", buf, 0)
    if magic != _MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}", 0)
    if version != _VERSION:
        raise WeightFormatError(f"unsupported version {version}", 4)
    pos = 12
    store = WeightStore()
    for _ in range(count):
        need(4, pos, "name length")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(nlen, pos, "tensor name")
        name = buf[pos: pos + nlen].decode("utf-8")
        pos += nlen
        if name in store:
            raise WeightFormatError(f"duplicate tensor name {name!r}", pos - nlen)
        need(4, pos, "rank")
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(4 * rank, pos, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        need(4 * size, pos, f"payload of {name!r}")
        store[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
    if pos != len(buf):
        raise WeightFormatError("trailing bytes after last tensor", pos)
    return store


def save_weights(store: WeightStore, path) -> None:
    Path(path).write_bytes(encode_weights(store))


def load_weights(path) -> WeightStore:
    return decode_weights(Path(path).read_bytes())


def init_weights(config, seed: int | None = None) -> WeightStore:
    """Deterministic He-uniform initialization of every tensor the config implies.

    Norm layers start as identity transforms, biases at zero, and the
    heatmap output bias at -2.19 so initial center scores sit near 0.1.
    """
    from .model import param_shapes

    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("scale", "var"):
            store[name] = np.ones(shape)
        elif leaf in ("shift", "mean"):
            store[name] = np.zeros(shape)
        elif leaf == "bias":
            fill = -2.19 if name.startswith("det.hm.1") else 0.0
            store[name] = np.full(shape, fill)
        else:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else int(shape[0])
            bound = np.sqrt(6.0 / max(fan_in, 1))
            store[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return store
