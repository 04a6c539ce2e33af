"""Named parameter collections, flat gradient views and the checkpoint format.

Checkpoint layout (all integers little-endian u32, data little-endian f64)::

    b"GRMP" | version
    then per tensor, in sorted name order:
    name_len | name (utf-8) | rank | dim_0 ... dim_{rank-1} | data
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from .autodiff import Tensor, backward

CHECKPOINT_MAGIC = b"GRMP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.flags.writeable = False
    return arr


class ParameterStore(Mapping[str, np.ndarray]):
    """Ordered, immutable name -> array mapping with a trainable subset.

    Updates never mutate: :meth:`replace` and :meth:`with_trainable` return
    new stores that share untouched arrays.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
                 trainable: Iterable[str] = ()):
        items = arrays.items() if isinstance(arrays, Mapping) else arrays
        self._arrays: dict[str, np.ndarray] = {}
        for k, v in items:
            self._arrays[k] = v if isinstance(v, np.ndarray) and not v.flags.writeable \
                and v.dtype == np.float64 else _frozen(v)
        trainable = tuple(trainable)
        unknown = [t for t in trainable if t not in self._arrays]
        if unknown:
            raise KeyError(f"trainable names not in store: {unknown}")
        self.trainable = tuple(k for k in self._arrays if k in set(trainable))

    def __getitem__(self, key: str) -> np.ndarray:
        return self._arrays[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self):
        return f"ParameterStore({len(self)} tensors, {len(self.trainable)} trainable)"

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParameterStore":
        missing = [k for k in updates if k not in self._arrays]
        if missing:
            raise KeyError(f"unknown parameters: {missing}")
        merged = dict(self._arrays)
        for k, v in updates.items():
            if np.shape(v) != merged[k].shape:
                raise ValueError(f"{k}: shape {np.shape(v)} != {merged[k].shape}")
            merged[k] = v
        return ParameterStore(merged, self.trainable)

    def with_trainable(self, names: Iterable[str]) -> "ParameterStore":
        return ParameterStore(self._arrays, names)

    def select(self, prefixes: Iterable[str]) -> list[str]:
        prefixes = tuple(prefixes)
        return [k for k in self._arrays if k.startswith(prefixes)]

    def leaves(self) -> dict[str, Tensor]:
        """Graph leaves; only trainable entries request gradients."""
        train = set(self.trainable)
        return {k: Tensor(v, requires_grad=k in train) for k, v in self._arrays.items()}

    def layout(self, names: Iterable[str] | None = None) -> "Layout":
        names = self.trainable if names is None else tuple(names)
        return Layout.from_shapes((k, self._arrays[k].shape) for k in names)

    def flat(self, names: Iterable[str] | None = None) -> np.ndarray:
        layout = self.layout(names)
        return layout.flatten(self._arrays)

    def num_parameters(self, names: Iterable[str] | None = None) -> int:
        names = self._arrays if names is None else names
        return int(sum(self._arrays[k].size for k in names))

    def checksum(self, names: Iterable[str] | None = None) -> str:
        names = list(self._arrays) if names is None else list(names)
        h = hashlib.sha256()
        for k in sorted(names):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._arrays[k]).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Layout:
    """Ordered (name, offset, shape) table of a flat vector."""

    entries: tuple[tuple[str, int, tuple[int, ...]], ...]
    size: int

    @classmethod
    def from_shapes(cls, shapes: Iterable[tuple[str, tuple[int, ...]]]) -> "Layout":
        entries, offset = [], 0
        for name, shape in shapes:
            shape = tuple(int(s) for s in shape)
            entries.append((name, offset, shape))
            offset += int(np.prod(shape, dtype=np.int64))
        return cls(tuple(entries), offset)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e[0] for e in self.entries)

    def flatten(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        """Concatenate entries in layout order; missing names become zeros."""
        out = np.zeros(self.size)
        for name, off, shape in self.entries:
            n = int(np.prod(shape, dtype=np.int64))
            if name in arrays:
                out[off:off + n] = np.asarray(arrays[name]).reshape(-1)
        return out

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.size,):
            raise ValueError(f"flat vector has shape {flat.shape}, layout wants ({self.size},)")
        out = {}
        for name, off, shape in self.entries:
            n = int(np.prod(shape, dtype=np.int64))
            out[name] = flat[off:off + n].reshape(shape).copy()
        return out

    def segments(self) -> Iterator[tuple[str, slice]]:
        for name, off, shape in self.entries:
            yield name, slice(off, off + int(np.prod(shape, dtype=np.int64)))


@dataclass(frozen=True)
class GradientVector:
    """Flat gradient over the trainable subset of a store."""

    values: np.ndarray
    layout: Layout

    @classmethod
    def from_grads(cls, grads: Mapping[str, np.ndarray], layout: Layout) -> "GradientVector":
        return cls(layout.flatten(grads), layout)

    def to_dict(self) -> dict[str, np.ndarray]:
        return self.layout.unflatten(self.values)

    def dot(self, other: "GradientVector") -> float:
        _check_layouts(self, other)
        return float(self.values @ other.values)

    def norm(self) -> float:
        return float(np.sqrt(self.values @ self.values))


def _check_layouts(a: GradientVector, b: GradientVector):
    if a.layout != b.layout:
        raise ValueError("gradient vectors have different layouts")


def value_and_grad(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
                   store: ParameterStore) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` on the store's leaves and differentiate it.

    Returns the loss and a gradient for every trainable name (zeros where the
    loss does not depend on the parameter).
    """
    leaves = store.leaves()
    loss = loss_fn(leaves)
    g = backward(loss)
    grads = {k: g.get(leaves[k].node_id, np.zeros(store[k].shape)) for k in store.trainable}
    return loss.item(), grads


# ---------------------------------------------------------------- checkpoint IO

def save_checkpoint(path, store: Mapping[str, np.ndarray]) -> None:
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    for name in sorted(store):
        arr = np.asarray(store[name], dtype=np.float64)
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    while pos < len(data):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        out[name] = arr
    return out
