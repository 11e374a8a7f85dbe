"""Closed-form pixel-wise solutions of the ADMM w-subproblems.

All vector operators take the per-pixel vector on the last axis and broadcast
over any leading axes, so the same function serves a single 10-vector or a
whole ``(n1, n2, nF, 10)`` block.

Alongside each prox there is an ``*_residual`` function returning the distance
from zero to the subdifferential of the pixel objective at a candidate
output. A zero residual certifies optimality, including on the nonsmooth
branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SizeError
from .operators import CH_E, CH_H, CH_TS, CH_TT, P_EIG, STAIC_CHANNELS, A_S
from .tensor import Stack, VectorStack

__all__ = [
    "ProxParams",
    "prox_data",
    "prox_bound",
    "prox_group",
    "prox_temporal",
    "prox_spatial",
    "solve_w",
    "data_residual",
    "bound_residual",
    "group_residual",
    "spatial_residual",
]

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class ProxParams:
    rho: float
    alpha_s: float = 0.0
    alpha_t: float = 0.0
    lb: float = 0.0
    ub: float = np.inf

    def __post_init__(self):
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.alpha_s < 0 or self.alpha_t < 0:
            raise ConfigError("alpha_s and alpha_t must be nonnegative")
        if not self.lb <= self.ub:
            raise ConfigError(f"lb {self.lb} exceeds ub {self.ub}")


def prox_data(x, m, rho):
    """Minimizer of ``rho/2 (x - z)^2 + 1/2 (z - m)^2``."""
    return (rho * np.asarray(x, dtype=np.float64) + m) / (rho + 1.0)


def prox_bound(x, lb=0.0, ub=np.inf):
    """Projection onto ``[lb, ub]``."""
    return np.clip(np.asarray(x, dtype=np.float64), lb, ub)


def prox_group(x, weight, rho, axis=-1):
    """Block soft-threshold: minimizer of ``rho/2 ||x - z||^2 + weight ||z||_2``.

    The vector runs along ``axis``. Vectors with ``||x|| <= weight / rho``
    (including the zero vector) map to 0.
    """
    x = np.asarray(x, dtype=np.float64)
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    thr = weight / rho
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norm > thr, 1.0 - thr / norm, 0.0)
    return scale * x


def prox_temporal(x, alpha_t, rho, axis=-1):
    """Prox of ``alpha_t ||.||_2`` on the nine 3D-Hessian channels."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] != 9:
        raise SizeError(f"temporal block needs 9 channels, got {x.shape[axis]}")
    return prox_group(x, alpha_t, rho, axis)


def prox_spatial(x, alpha_s, rho, axis=-1):
    """Minimizer of ``rho/2 ||x - z||^2 + sqrt(2) alpha_s ||A_s z||_2`` over 10-vectors.

    In the eigenbasis ``P`` of ``A_s^T A_s`` the penalty only sees the first
    five coordinates, which get a block soft-threshold with threshold
    ``sqrt(2) alpha_s / rho``; the other five pass through unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] != 10:
        raise SizeError(f"spatial block needs 10 channels, got {x.shape[axis]}")
    if alpha_s == 0:
        return x.copy()
    xf = np.moveaxis(x, axis, 0)
    y = np.tensordot(P_EIG.T, xf, axes=(1, 0))
    y[:5] = prox_group(y[:5], SQRT2 * alpha_s, rho, axis=0)
    return np.moveaxis(np.tensordot(P_EIG, y, axes=(1, 0)), 0, axis)


def solve_w(x: VectorStack, m, p: ProxParams) -> VectorStack:
    """Apply every STAIC pixel-wise prox to the shifted point ``x``."""
    xc = x.channels_first() if isinstance(x, VectorStack) else np.asarray(x)
    if xc.shape[0] != STAIC_CHANNELS:
        raise SizeError(f"expected {STAIC_CHANNELS} channels, got {xc.shape[0]}")
    mm = m.data if isinstance(m, Stack) else np.asarray(m, dtype=np.float64)
    return VectorStack.from_channels_first(_solve_w_array(xc, mm, p))


def _solve_w_array(xc: np.ndarray, m: np.ndarray, p: ProxParams) -> np.ndarray:
    w = np.empty_like(xc)
    w[CH_H] = prox_data(xc[CH_H], m, p.rho)
    w[CH_TS] = prox_spatial(xc[CH_TS], p.alpha_s, p.rho, axis=0)
    w[CH_TT] = prox_temporal(xc[CH_TT], p.alpha_t, p.rho, axis=0)
    w[CH_E] = prox_bound(xc[CH_E], p.lb, p.ub)
    return w


# --------------------------------------------------------------------------
# optimality certificates


def data_residual(z, x, m, rho):
    return np.abs(rho * (z - x) + (z - m))


def bound_residual(z, x, lb=0.0, ub=np.inf, rho=1.0):
    """Distance of ``rho (x - z)`` from the normal cone of ``[lb, ub]`` at ``z``.

    Infeasible ``z`` gives ``inf``.
    """
    z = np.asarray(z, dtype=np.float64)
    g = rho * (np.asarray(x, dtype=np.float64) - z)
    at_lb = z <= lb
    at_ub = z >= ub
    r = np.where(at_lb & at_ub, 0.0,
                 np.where(at_lb, np.maximum(g, 0.0),
                          np.where(at_ub, np.maximum(-g, 0.0), np.abs(g))))
    return np.where((z < lb) | (z > ub), np.inf, r)


def group_residual(z, x, weight, rho):
    """Distance from 0 to ``rho (z - x) + weight * d||z||`` per vector."""
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    nz = np.linalg.norm(z, axis=-1)
    g = rho * (x - z)
    with np.errstate(divide="ignore", invalid="ignore"):
        smooth = np.linalg.norm(g - weight * z / nz[..., None], axis=-1)
    at_zero = np.maximum(np.linalg.norm(g, axis=-1) - weight, 0.0)
    return np.where(nz > 0, smooth, at_zero)


def spatial_residual(z, x, alpha_s, rho):
    """Certificate for :func:`prox_spatial`.

    Stationarity reads ``rho (x - z) = sqrt(2) alpha_s A_s^T u`` with
    ``u = A_s z / ||A_s z||`` when ``A_s z != 0`` and ``||u|| <= 1`` otherwise.
    Since ``A_s A_s^T = I``, ``u`` is recovered as ``A_s rho (x - z) / c``.
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    c = SQRT2 * alpha_s
    g = rho * (x - z)
    az = z @ A_S.T
    naz = np.linalg.norm(az, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        smooth = np.linalg.norm(g - c * (az / naz[..., None]) @ A_S, axis=-1)
    ag = g @ A_S.T
    # component of g outside range(A_s^T) must vanish
    off_range = np.linalg.norm(g - ag @ A_S, axis=-1)
    at_zero = off_range + np.maximum(np.linalg.norm(ag, axis=-1) - c, 0.0)
    # A_s z of a thresholded output is zero only up to rounding
    tiny = 1e-12 * np.maximum(1.0, np.linalg.norm(z, axis=-1))
    return np.where(naz > tiny, smooth, at_zero)
