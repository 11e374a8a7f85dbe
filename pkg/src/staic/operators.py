"""Periodic derivative stencils, stacked operator banks and their adjoints.

Every operator here uses circular (periodic) boundaries, which makes all of
them diagonal in the 3D DFT basis. Axis 0 is y (rows), axis 1 is x (columns),
axis 2 is t (frames); a filter offset ``(dy, dx, dt)`` is stored in that
order.

Convolution convention: ``(f * s)(r) = sum_o f(o) s(r - o)``.

The STAIC bank rows, which fix the channel index of ``w`` and ``beta``:

====  ==========  =======  =======================
ch    block       acts on  filter
====  ==========  =======  =======================
0     h           g        PSF (per frame)
1-5   T_s         g        dxx, dxy, dyx, dyy, delta (2D)
6-10  T_s         v        dxx, dxy, dyx, dyy, delta (2D)
11-19 T_t         v        dxx, dyy, dxy, dyx, dxt, dtx, dyt, dty, dtt
20    e           g        delta
21    e           v        delta
====  ==========  =======  =======================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.fft as sfft

from .errors import SizeError
from .tensor import PairStack, Stack, VectorStack

__all__ = [
    "Filter3",
    "BankRow",
    "OperatorBank",
    "BankOperator",
    "convolve",
    "convolve_frames",
    "adjoint_convolve",
    "apply_bank",
    "adjoint_bank",
    "transfer_function",
    "psf_filter",
    "staic_bank",
    "A_S",
    "P_EIG",
    "D_EIG",
    "DELTA",
    "DXX",
    "DYY",
    "DTT",
    "DXY",
    "DYX",
    "DXT",
    "DTX",
    "DYT",
    "DTY",
    "DX",
    "DY",
    "DT",
    "HESSIAN_3D",
    "CH_H",
    "CH_TS",
    "CH_TT",
    "CH_E",
    "STAIC_CHANNELS",
]

Offset = Tuple[int, int, int]


@dataclass(frozen=True)
class Filter3:
    """A sparse 3D stencil: ``taps[i]`` sits at ``offsets[i] = (dy, dx, dt)``."""

    taps: Tuple[float, ...]
    offsets: Tuple[Offset, ...]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if len(self.taps) != len(self.offsets):
            raise ValueError("taps and offsets differ in length")
        if not np.all(np.isfinite(self.taps)):
            raise ValueError(f"filter {self.name!r} has non-finite taps")

    @classmethod
    def from_dict(cls, taps: Dict[Offset, float], name: str = "") -> "Filter3":
        items = sorted((tuple(int(v) for v in k), float(t)) for k, t in taps.items() if t != 0.0)
        return cls(tuple(t for _, t in items), tuple(k for k, _ in items), name)

    @classmethod
    def from_kernel_2d(cls, kernel, name: str = "h") -> "Filter3":
        """A per-frame 2D kernel whose centre sample is at ``(n0 // 2, n1 // 2)``."""
        k = np.asarray(kernel, dtype=np.float64)
        if k.ndim != 2:
            raise SizeError(f"2D kernel expected, got shape {k.shape}")
        c0, c1 = k.shape[0] // 2, k.shape[1] // 2
        taps = {(i - c0, j - c1, 0): k[i, j] for i, j in zip(*np.nonzero(k))}
        return cls.from_dict(taps, name)

    def as_dict(self) -> Dict[Offset, float]:
        return dict(zip(self.offsets, self.taps))

    def extent(self) -> Tuple[int, int, int]:
        """Support length along each axis."""
        if not self.offsets:
            return (1, 1, 1)
        o = np.array(self.offsets)
        return tuple(int(v) for v in o.max(axis=0) - o.min(axis=0) + 1)

    def check_fits(self, dims: Sequence[int]) -> None:
        ext = self.extent()
        if any(e > n for e, n in zip(ext, dims)):
            raise SizeError(f"filter {self.name!r} support {ext} exceeds stack dims {tuple(dims)}")

    def adjoint(self) -> "Filter3":
        """Spatially reversed filter (the correlation kernel)."""
        return Filter3.from_dict({(-a, -b, -c): t for (a, b, c), t in self.as_dict().items()},
                                 self.name + "~")

    def scaled(self, c: float) -> "Filter3":
        return Filter3(tuple(c * t for t in self.taps), self.offsets, self.name)

    def compose(self, other: "Filter3", name: str = "") -> "Filter3":
        out: Dict[Offset, float] = {}
        for (a, ta) in self.as_dict().items():
            for (b, tb) in other.as_dict().items():
                k = (a[0] + b[0], a[1] + b[1], a[2] + b[2])
                out[k] = out.get(k, 0.0) + ta * tb
        return Filter3.from_dict(out, name)

    def __repr__(self):
        return f"Filter3({self.name or '?'}, {len(self.taps)} taps)"


def _unit(axis: int, step: int) -> Offset:
    o = [0, 0, 0]
    o[axis] = step
    return tuple(o)


def _first_diff(axis: int, name: str) -> Filter3:
    # forward difference s(r + e) - s(r)
    return Filter3.from_dict({_unit(axis, -1): 1.0, (0, 0, 0): -1.0}, name)


def _second_diff(axis: int, name: str) -> Filter3:
    return Filter3.from_dict({_unit(axis, -1): 1.0, (0, 0, 0): -2.0, _unit(axis, 1): 1.0}, name)


AX_Y, AX_X, AX_T = 0, 1, 2

DELTA = Filter3.from_dict({(0, 0, 0): 1.0}, "delta")
DX = _first_diff(AX_X, "dx")
DY = _first_diff(AX_Y, "dy")
DT = _first_diff(AX_T, "dt")
DXX = _second_diff(AX_X, "dxx")
DYY = _second_diff(AX_Y, "dyy")
DTT = _second_diff(AX_T, "dtt")
# Mixed derivatives: one separable composition each, so dxy and dyx are the same map.
DXY = DX.compose(DY, "dxy")
DYX = DX.compose(DY, "dyx")
DXT = DX.compose(DT, "dxt")
DTX = DX.compose(DT, "dtx")
DYT = DY.compose(DT, "dyt")
DTY = DY.compose(DT, "dty")

# 3x3 Hessian, row-major: [[xx, xy, xt], [yx, yy, yt], [tx, ty, tt]]
HESSIAN_3D = (DXX, DXY, DXT, DYX, DYY, DYT, DTX, DTY, DTT)

# A_s z == (z[:5] - z[5:]) / sqrt(2)
_R2 = 1.0 / np.sqrt(2.0)
A_S = np.hstack([np.eye(5), -np.eye(5)]) * _R2
A_S.setflags(write=False)
# Columns 0-4 span the eigenvalue-1 space of A_s^T A_s, columns 5-9 its null space.
P_EIG = np.block([[np.eye(5), np.eye(5)], [-np.eye(5), np.eye(5)]]) * _R2
P_EIG.setflags(write=False)
D_EIG = np.diag([1.0] * 5 + [0.0] * 5)
D_EIG.setflags(write=False)


# --------------------------------------------------------------------------
# direct (roll-based) convolution


def _arr(s) -> np.ndarray:
    a = s.data if isinstance(s, Stack) else np.asarray(s, dtype=np.float64)
    if a.ndim != 3:
        raise SizeError(f"expected a 3D stack, got shape {a.shape}")
    return a


def _convolve_array(a: np.ndarray, f: Filter3) -> np.ndarray:
    out = np.zeros_like(a)
    for tap, off in zip(f.taps, f.offsets):
        out += tap * np.roll(a, off, axis=(0, 1, 2))
    return out


def convolve(s, f: Filter3) -> Stack:
    """Circular convolution of a stack with a 3D stencil."""
    a = _arr(s)
    f.check_fits(a.shape)
    return Stack(_convolve_array(a, f), copy=False)


def adjoint_convolve(s, f: Filter3) -> Stack:
    """Circular correlation; the exact adjoint of :func:`convolve`."""
    a = _arr(s)
    f.check_fits(a.shape)
    return Stack(_convolve_array(a, f.adjoint()), copy=False)


# --------------------------------------------------------------------------
# frequency responses


def _kernel_array(f: Filter3, dims) -> np.ndarray:
    f.check_fits(dims)
    k = np.zeros(tuple(dims))
    for tap, off in zip(f.taps, f.offsets):
        k[off[0] % dims[0], off[1] % dims[1], off[2] % dims[2]] += tap
    return k


@lru_cache(maxsize=256)
def _rfft_response(f: Filter3, dims: Tuple[int, int, int]) -> np.ndarray:
    out = sfft.rfftn(_kernel_array(f, dims))
    out.setflags(write=False)
    return out


def transfer_function(f: Filter3, dims: Sequence[int]) -> np.ndarray:
    """Full 3D DFT response: ``fftn(convolve(s, f)) == H * fftn(s)``."""
    return sfft.fftn(_kernel_array(f, tuple(int(d) for d in dims)))


def psf_filter(h) -> Filter3:
    if isinstance(h, Filter3):
        return h
    return Filter3.from_kernel_2d(h)


def convolve_frames(s, h) -> Stack:
    """Blur every frame with the same 2D kernel; frames do not mix."""
    a = _arr(s)
    hk = np.asarray(h, dtype=np.float64)
    if hk.ndim != 2:
        raise SizeError(f"2D kernel expected, got shape {hk.shape}")
    if hk.shape[0] > a.shape[0] or hk.shape[1] > a.shape[1]:
        raise SizeError(f"kernel {hk.shape} larger than frame {a.shape[:2]}")
    H = _rfft_response(psf_filter(hk), a.shape)
    return Stack(sfft.irfftn(H * sfft.rfftn(a), s=a.shape), copy=False)


# --------------------------------------------------------------------------
# operator banks


@dataclass(frozen=True)
class BankRow:
    """One output channel: a filter (or None) per input component."""

    name: str
    filters: Tuple[Optional[Filter3], ...]

    @classmethod
    def on(cls, component: int, f: Filter3, n_components: int = 2, name: str = "") -> "BankRow":
        filters = [None] * n_components
        filters[component] = f
        return cls(name or f.name, tuple(filters))


@dataclass(frozen=True)
class OperatorBank:
    """Ordered rows mapping ``K`` input stacks to a ``C``-channel vector stack."""

    rows: Tuple[BankRow, ...]
    n_components: int = 2

    def __post_init__(self):
        for r in self.rows:
            if len(r.filters) != self.n_components:
                raise ValueError(f"row {r.name!r} has {len(r.filters)} filters, "
                                 f"bank has {self.n_components} components")

    @property
    def n_channels(self) -> int:
        return len(self.rows)

    def names(self):
        return [r.name for r in self.rows]

    def check_fits(self, dims) -> None:
        for r in self.rows:
            for f in r.filters:
                if f is not None:
                    f.check_fits(dims)

    def operator(self, dims) -> "BankOperator":
        return _bank_operator(self, tuple(int(d) for d in dims))


class BankOperator:
    """An :class:`OperatorBank` bound to stack dims.

    Arrays are channel-first: inputs ``(K, n1, n2, nF)``, outputs
    ``(C, n1, n2, nF)``. Short stencils are applied directly with circular
    shifts; long kernels (the PSF) go through the DFT. Normal equations
    ``T^T T f = rhs`` are solved exactly frequency by frequency.
    """

    # filters with more taps than this are applied through the DFT
    DIRECT_MAX_TAPS = 32

    def __init__(self, bank: OperatorBank, dims: Tuple[int, int, int]):
        bank.check_fits(dims)
        self.bank = bank
        self.dims = dims
        C, K = bank.n_channels, bank.n_components
        fshape = _rfft_response(DELTA, dims).shape
        # (channel, component, filter) triples that are nonzero
        self.links = [(c, k, f) for c, row in enumerate(bank.rows)
                      for k, f in enumerate(row.filters) if f is not None]
        spectra = {(c, k): _rfft_response(f, dims) for c, k, f in self.links}
        self.spectra = spectra
        self._adjoint_filters = {(c, k): f.adjoint() for c, k, f in self.links}
        normal = np.zeros((K, K) + fshape, dtype=np.complex128)
        for c in range(C):
            ks = [k for (cc, k) in spectra if cc == c]
            for k in ks:
                for j in ks:
                    normal[k, j] += np.conj(spectra[c, k]) * spectra[c, j]
        self.normal = normal
        self._inv = None

    def _inverse(self):
        # built on first solve; banks without identity rows may never need it
        if self._inv is None:
            K, n = self.n_components, self.normal
            if K == 1:
                det = n[0, 0].real
                inv = 1.0 / np.where(det == 0, 1.0, det)
            elif K == 2:
                a, b, d = n[0, 0].real, n[0, 1], n[1, 1].real
                det = a * d - (b * np.conj(b)).real
                r = 1.0 / np.where(det == 0, 1.0, det)
                inv = ((d * r, -b * r), (-np.conj(b) * r, a * r))
            else:
                det = np.linalg.det(np.moveaxis(n, (0, 1), (-2, -1)))
                inv = True
            if np.any(np.abs(det) <= 1e-12 * np.max(np.abs(det))):
                raise SizeError("normal equations are singular at some frequency; "
                                "the bank needs an identity-like row")
            self._inv = inv
        return self._inv

    @property
    def n_channels(self):
        return self.bank.n_channels

    @property
    def n_components(self):
        return self.bank.n_components

    def _direct(self, f: Filter3) -> bool:
        return len(f.taps) <= self.DIRECT_MAX_TAPS

    def fft(self, x: np.ndarray) -> np.ndarray:
        return sfft.rfftn(x, axes=(1, 2, 3))

    def ifft(self, x: np.ndarray) -> np.ndarray:
        return sfft.irfftn(x, s=self.dims, axes=(1, 2, 3))

    def forward(self, f: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_channels,) + self.dims)
        f_hat = {}
        for c, k, filt in self.links:
            if self._direct(filt):
                out[c] += _convolve_array(f[k], filt)
            else:
                if k not in f_hat:
                    f_hat[k] = sfft.rfftn(f[k])
                out[c] += sfft.irfftn(self.spectra[c, k] * f_hat[k], s=self.dims)
        return out

    def adjoint(self, w: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_components,) + self.dims)
        for c, k, filt in self.links:
            if self._direct(filt):
                out[k] += _convolve_array(w[c], self._adjoint_filters[c, k])
            else:
                out[k] += sfft.irfftn(np.conj(self.spectra[c, k]) * sfft.rfftn(w[c]),
                                      s=self.dims)
        return out

    def solve_normal_hat(self, rhs_hat: np.ndarray) -> np.ndarray:
        """Solve ``(T^T T) f = rhs`` for DFT-domain ``rhs``."""
        K = self.n_components
        inv = self._inverse()
        if K == 1:
            return rhs_hat * inv
        if K == 2:
            return np.stack([inv[0][0] * rhs_hat[0] + inv[0][1] * rhs_hat[1],
                             inv[1][0] * rhs_hat[0] + inv[1][1] * rhs_hat[1]])
        n = np.moveaxis(self.normal, (0, 1), (-2, -1))
        r = np.moveaxis(rhs_hat, 0, -1)[..., None]
        return np.moveaxis(np.linalg.solve(n, r)[..., 0], -1, 0)

    def solve_normal(self, rhs: np.ndarray) -> np.ndarray:
        return self.ifft(self.solve_normal_hat(self.fft(rhs)))

    def least_squares(self, y: np.ndarray) -> np.ndarray:
        """``argmin_f 0.5 * ||T f - y||^2``."""
        return self.solve_normal(self.adjoint(y))


@lru_cache(maxsize=32)
def _bank_operator(bank: OperatorBank, dims: Tuple[int, int, int]) -> BankOperator:
    return BankOperator(bank, dims)


def _pair_array(f) -> np.ndarray:
    if isinstance(f, PairStack):
        return f.to_array()
    if isinstance(f, Stack):
        return f.data[None]
    return np.asarray(f, dtype=np.float64)


def apply_bank(f, bank: OperatorBank) -> VectorStack:
    """Stack every row's output into a ``C``-channel VectorStack.

    ``f`` is a PairStack for two-component banks or a Stack for one-component
    banks.
    """
    x = _pair_array(f)
    if x.shape[0] != bank.n_components:
        raise SizeError(f"bank needs {bank.n_components} components, got {x.shape[0]}")
    op = bank.operator(x.shape[1:])
    return VectorStack.from_channels_first(op.forward(x))


def adjoint_bank(w: VectorStack, bank: OperatorBank):
    """Exact adjoint of :func:`apply_bank`."""
    x = w.channels_first()
    if x.shape[0] != bank.n_channels:
        raise SizeError(f"bank has {bank.n_channels} channels, got {x.shape[0]}")
    out = bank.operator(x.shape[1:]).adjoint(x)
    if bank.n_components == 2:
        return PairStack.from_array(out)
    if bank.n_components == 1:
        return Stack(out[0], copy=False)
    return out


# --------------------------------------------------------------------------
# the STAIC bank

CH_H = 0
CH_TS = slice(1, 11)
CH_TT = slice(11, 20)
CH_E = slice(20, 22)
STAIC_CHANNELS = 22

_TS_FILTERS = (DXX, DXY, DYX, DYY, DELTA)
_TT_FILTERS = (DXX, DYY, DXY, DYX, DXT, DTX, DYT, DTY, DTT)


def staic_bank(h) -> OperatorBank:
    """The combined operator ``T = [h; T_s; T_t; e]`` over ``f = (g, v)``."""
    hf = psf_filter(h)
    rows = [BankRow.on(0, hf, name="h")]
    rows += [BankRow.on(0, f, name=f"ts_g_{f.name}") for f in _TS_FILTERS]
    rows += [BankRow.on(1, f, name=f"ts_v_{f.name}") for f in _TS_FILTERS]
    rows += [BankRow.on(1, f, name=f"tt_{f.name}") for f in _TT_FILTERS]
    rows += [BankRow.on(0, DELTA, name="e_g"), BankRow.on(1, DELTA, name="e_v")]
    return OperatorBank(tuple(rows), 2)
