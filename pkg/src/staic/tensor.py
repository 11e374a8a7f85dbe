"""Scalar and vector-valued 2D+time images and the STK1 container format.

Axis order is fixed throughout the package as (row=y, col=x, frame=t).
A scalar stack has shape ``(n1, n2, nF)``; a vector stack appends a channel
axis, ``(n1, n2, nF, C)``.

STK1 layout (all little-endian)::

    bytes 0-3    magic b"STK1"
    bytes 4-15   n1, n2, nF as uint32
    bytes 16-19  channel count C as uint32 (1 for a scalar stack)
    payload      C*n1*n2*nF float32, frame-major, then row-major within a
                 frame, channel innermost

so the linear index of sample (r, c, t, ch) is ``((t*n1 + r)*n2 + c)*C + ch``.
"""

from __future__ import annotations

import csv
import os
import struct
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import DataError, FormatError, SizeError

__all__ = [
    "Stack",
    "VectorStack",
    "PairStack",
    "read_stack",
    "read_vector_stack",
    "write_stack",
    "frame",
    "linear_index",
    "import_csv_frames",
    "export_csv_frames",
]

MAGIC = b"STK1"
HEADER = struct.Struct("<4sIIII")
HEADER_SIZE = HEADER.size  # 20
# Refuse payloads above 2**31 samples; nothing at desk scale comes close.
MAX_SAMPLES = 2**31

PathLike = Union[str, os.PathLike]


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{what} contains non-finite samples")


class Stack:
    """A real-valued 2D+time image of shape ``(n1, n2, nF)``.

    Samples are held as float64. ``data`` exposes the underlying array; its
    shape cannot be changed through the object.
    """

    __slots__ = ("_data",)

    def __init__(self, data, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise SizeError(f"Stack needs three positive dims, got shape {arr.shape}")
        _check_finite(arr, "Stack")
        self._data = arr

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "Stack":
        return cls(np.zeros(tuple(dims)), copy=False)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dims(self) -> tuple:
        return self._data.shape

    shape = dims

    @property
    def n_frames(self) -> int:
        return self._data.shape[2]

    def frame(self, i: int) -> np.ndarray:
        return frame(self, i)

    def copy(self) -> "Stack":
        return Stack(self._data)

    def __array__(self, dtype=None, copy=None):
        return self._data if dtype is None else self._data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Stack):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self._data, other._data))

    __hash__ = None

    def __repr__(self):
        n1, n2, nf = self.dims
        return f"Stack({n1}x{n2}x{nf})"


class VectorStack:
    """A 2D+time image with a fixed-length channel vector at every sample."""

    __slots__ = ("_data",)

    def __init__(self, data, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy)
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise SizeError(f"VectorStack needs shape (n1, n2, nF, C), got {arr.shape}")
        _check_finite(arr, "VectorStack")
        self._data = arr

    @classmethod
    def from_channels_first(cls, arr: np.ndarray) -> "VectorStack":
        """Wrap a ``(C, n1, n2, nF)`` array without copying."""
        return cls(np.moveaxis(np.asarray(arr, dtype=np.float64), 0, -1), copy=False)

    def channels_first(self) -> np.ndarray:
        return np.moveaxis(self._data, -1, 0)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dims(self) -> tuple:
        return self._data.shape[:3]

    @property
    def n_channels(self) -> int:
        return self._data.shape[3]

    def channel(self, c: int) -> Stack:
        return Stack(self._data[..., c])

    def __repr__(self):
        n1, n2, nf = self.dims
        return f"VectorStack({n1}x{n2}x{nf}, C={self.n_channels})"


class PairStack:
    """The stacked variable ``(g, v)``: restored image and its smooth part."""

    __slots__ = ("g", "v")

    def __init__(self, g, v):
        g = g if isinstance(g, Stack) else Stack(g)
        v = v if isinstance(v, Stack) else Stack(v)
        if g.dims != v.dims:
            raise SizeError(f"g and v dims differ: {g.dims} vs {v.dims}")
        self.g = g
        self.v = v

    @classmethod
    def zeros(cls, dims) -> "PairStack":
        return cls(Stack.zeros(dims), Stack.zeros(dims))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PairStack":
        """Build from a ``(2, n1, n2, nF)`` array."""
        return cls(Stack(arr[0]), Stack(arr[1]))

    def to_array(self) -> np.ndarray:
        return np.stack([self.g.data, self.v.data])

    @property
    def dims(self) -> tuple:
        return self.g.dims

    def __repr__(self):
        n1, n2, nf = self.dims
        return f"PairStack({n1}x{n2}x{nf})"


def frame(s: Stack, i: int) -> np.ndarray:
    """Read/write view of frame ``i``; writes show up in ``s``."""
    nf = s.data.shape[2]
    if not 0 <= i < nf:
        raise IndexError(f"frame index {i} out of range for {nf} frames")
    return s.data[:, :, i]


def linear_index(r: int, c: int, t: int, dims: Sequence[int]) -> int:
    """Position of sample (r, c, t) in the serialized payload of a scalar stack."""
    n1, n2, _ = dims
    return t * n1 * n2 + r * n2 + c


def _to_payload(arr4: np.ndarray) -> bytes:
    # (n1, n2, nF, C) -> (nF, n1, n2, C), C-order
    with np.errstate(over="ignore"):
        out = np.ascontiguousarray(arr4.transpose(2, 0, 1, 3)).astype("<f4")
    _check_finite(out, "payload (after float32 conversion)")
    return out.tobytes()


def write_stack(s: Union[Stack, VectorStack], path: PathLike) -> None:
    """Write a Stack or VectorStack as STK1.

    The file is written to a temporary sibling and moved into place so a
    reader never sees a partial file.
    """
    if isinstance(s, Stack):
        arr4 = s.data[..., None]
    elif isinstance(s, VectorStack):
        arr4 = s.data
    else:
        raise TypeError(f"cannot write {type(s).__name__}")
    _check_finite(arr4, "stack")
    n1, n2, nf, c = arr4.shape
    payload = _to_payload(arr4)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, n1, n2, nf, c))
        fh.write(payload)
    os.replace(tmp, path)


def _read(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, n1, n2, nf, c = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if min(n1, n2, nf, c) < 1:
        raise SizeError(f"{path}: zero dimension in header ({n1}, {n2}, {nf}, {c})")
    count = n1 * n2 * nf * c
    if count > MAX_SAMPLES:
        raise SizeError(f"{path}: {count} samples exceeds the supported maximum")
    if len(raw) - HEADER_SIZE != 4 * count:
        raise SizeError(
            f"{path}: payload has {len(raw) - HEADER_SIZE} bytes, header implies {4 * count}"
        )
    payload = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE, count=count)
    if not np.all(np.isfinite(payload)):
        raise DataError(f"{path}: payload contains non-finite samples")
    return payload.astype(np.float64).reshape(nf, n1, n2, c).transpose(1, 2, 0, 3)


def read_stack(path: PathLike) -> Stack:
    """Read a single-channel STK1 file."""
    arr = _read(path)
    if arr.shape[3] != 1:
        raise FormatError(f"{path}: expected 1 channel, file has {arr.shape[3]}")
    return Stack(arr[..., 0])


def read_vector_stack(path: PathLike) -> VectorStack:
    return VectorStack(_read(path))


def import_csv_frames(paths: Iterable[PathLike]) -> Stack:
    """Build a Stack from one comma-separated file per frame."""
    frames = []
    for p in paths:
        with open(p, newline="") as fh:
            rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
        frames.append(np.array(rows, dtype=np.float64))
    if not frames:
        raise SizeError("no frames given")
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise SizeError(f"frames have differing shapes: {sorted(shapes)}")
    return Stack(np.stack(frames, axis=2))


def export_csv_frames(s: Stack, pattern: str) -> list:
    """Write each frame to ``pattern.format(i)``; returns the paths written."""
    out = []
    for i in range(s.n_frames):
        p = pattern.format(i)
        np.savetxt(p, s.frame(i), delimiter=",", fmt="%.9g")
        out.append(p)
    return out
