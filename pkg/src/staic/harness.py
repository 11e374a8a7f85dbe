"""Synthetic measurement pipeline and quality metrics.

Covers the Airy PSF for a given numerical aperture, mixed Poisson-Gaussian
corruption, blob phantoms with labelled moving/static regions, SNR and
frame-averaged SSIM, and a grid runner that scores every solver on every
(phantom, NA, gamma_p) cell.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import j1

from .baselines import BaselineConfig, restore_cst, restore_ictv, restore_tv2_3d
from .errors import ConfigError, DataError, SizeError, StaicError
from .operators import convolve_frames
from .solver import SolverConfig, restore_staic
from .tensor import Stack

log = logging.getLogger(__name__)

__all__ = [
    "PsfSpec",
    "NoiseSpec",
    "Blob",
    "PhantomSpec",
    "Phantom",
    "ExperimentSpec",
    "make_psf",
    "corrupt",
    "snr_db",
    "ssim_frame",
    "ssim_mean",
    "make_phantom",
    "reference_phantom",
    "run_experiment",
    "RESULT_COLUMNS",
    "SOLVERS",
    "write_results_csv",
]

AIRY_ZERO = 3.831705970207512  # first zero of J1


# --------------------------------------------------------------------------
# PSF


@dataclass(frozen=True)
class PsfSpec:
    na: float = 1.0
    wavelength_px: float = 8.0
    kernel_radius: int = 8

    def __post_init__(self):
        if not self.na > 0:
            raise ConfigError(f"na must be positive, got {self.na}")
        if not self.wavelength_px > 0:
            raise ConfigError(f"wavelength_px must be positive, got {self.wavelength_px}")
        if self.kernel_radius < 1:
            raise ConfigError(f"kernel_radius must be >= 1, got {self.kernel_radius}")

    @property
    def first_zero(self) -> float:
        """Radius of the first dark ring, in pixels."""
        return 0.61 * self.wavelength_px / self.na


def make_psf(spec: PsfSpec) -> np.ndarray:
    """Airy intensity pattern ``(2 J1(v) / v)^2`` on a ``(2R+1)^2`` grid, unit sum."""
    r0 = spec.first_zero
    R = spec.kernel_radius
    if R < r0:
        raise ConfigError(f"kernel_radius {R} does not contain the main lobe (radius {r0:.3f})")
    yy, xx = np.mgrid[-R:R + 1, -R:R + 1].astype(np.float64)
    v = AIRY_ZERO * np.hypot(yy, xx) / r0
    with np.errstate(invalid="ignore", divide="ignore"):
        amp = np.where(v > 0, 2.0 * j1(v) / v, 1.0)
    k = amp * amp
    return k / k.sum()


def fwhm(kernel: np.ndarray) -> float:
    """Full width at half maximum along the central row, linearly interpolated."""
    row = kernel[kernel.shape[0] // 2]
    c = row.size // 2
    half = row[c] / 2.0
    i = c
    while i + 1 < row.size and row[i + 1] >= half:
        i += 1
    if i + 1 == row.size:
        return float(row.size)
    frac = (row[i] - half) / (row[i] - row[i + 1])
    return 2.0 * (i - c + frac)


# --------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseSpec:
    gamma_p: float = 1.0
    sigma_g: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.gamma_p > 0:
            raise ConfigError(f"gamma_p must be positive, got {self.gamma_p}")
        if self.sigma_g < 0:
            raise ConfigError(f"sigma_g must be nonnegative, got {self.sigma_g}")


def _rng(seed: int, *stream: int) -> np.random.Generator:
    # Philox is counter-based: one key per (seed, stream) pair, schedule independent.
    key = np.random.SeedSequence([int(seed) & (2**64 - 1), *stream])
    return np.random.Generator(np.random.Philox(key))


def corrupt(g, h, n: NoiseSpec) -> Stack:
    """``P(gamma_p (h*g)) / gamma_p + N(0, sigma_g^2)``, seeded by ``n.seed``."""
    ga = g.data if isinstance(g, Stack) else np.asarray(g, dtype=np.float64)
    if np.any(ga < 0):
        raise DataError("ground truth must be nonnegative")
    blurred = convolve_frames(ga, h).data
    neg = blurred < 0
    if np.any(neg):
        # round-off from the FFT blur can dip just below zero
        log.info("clipping %d negative blurred samples (min %.3g)", int(neg.sum()), blurred.min())
        blurred = np.where(neg, 0.0, blurred)
    rng = _rng(n.seed)
    counts = rng.poisson(n.gamma_p * blurred).astype(np.float64)
    out = counts / n.gamma_p
    if n.sigma_g > 0:
        out = out + rng.normal(0.0, n.sigma_g, size=out.shape)
    return Stack(out, copy=False)


# --------------------------------------------------------------------------
# metrics


def _pair(truth, estimate) -> Tuple[np.ndarray, np.ndarray]:
    a = truth.data if isinstance(truth, Stack) else np.asarray(truth, dtype=np.float64)
    b = estimate.data if isinstance(estimate, Stack) else np.asarray(estimate, dtype=np.float64)
    if a.shape != b.shape:
        raise SizeError(f"dims differ: {a.shape} vs {b.shape}")
    return a, b


def snr_db(truth, estimate) -> float:
    """``10 log10(||truth||^2 / ||truth - estimate||^2)``; ``inf`` for an exact match."""
    a, b = _pair(truth, estimate)
    err = float(np.sum((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.sum(a * a)) / err)


SSIM_WINDOW = 8


def ssim_frame(x: np.ndarray, y: np.ndarray, data_range: float, win: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``win x win`` windows of one frame.

    Window statistics use the uniform weights ``1/win^2`` (population
    variance and covariance).
    """
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    wx = sliding_window_view(x, (win, win))
    wy = sliding_window_view(y, (win, win))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = (wx * wx).mean(axis=(-2, -1)) - mx * mx
    vy = (wy * wy).mean(axis=(-2, -1)) - my * my
    cxy = (wx * wy).mean(axis=(-2, -1)) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def ssim_mean(truth, estimate, win: int = SSIM_WINDOW) -> float:
    """Per-frame SSIM averaged over frames.

    Each frame uses its own data range ``L = max - min`` of the truth frame;
    a constant truth frame falls back to ``L = 1``.
    """
    a, b = _pair(truth, estimate)
    if a.shape[0] < win or a.shape[1] < win:
        raise SizeError(f"frames {a.shape[:2]} smaller than the {win}x{win} window")
    if np.array_equal(a, b):
        return 1.0
    vals = []
    for t in range(a.shape[2]):
        L = float(a[:, :, t].max() - a[:, :, t].min())
        if L == 0.0:
            log.warning("constant truth frame %d; using data range 1.0 for SSIM", t)
            L = 1.0
        vals.append(ssim_frame(a[:, :, t], b[:, :, t], L, win))
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class Blob:
    """A Gaussian spot; ``velocity`` is (dy, dx) in pixels per frame."""

    center: Tuple[float, float]
    radius: float
    intensity: float
    velocity: Tuple[float, float] = (0.0, 0.0)

    @property
    def moving(self) -> bool:
        return self.velocity != (0.0, 0.0)


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "mixed-scene"  # moving-blob | static-blobs | mixed-scene
    dims: Tuple[int, int, int] = (64, 64, 8)
    n_static: int = 4
    n_moving: int = 2
    speed: float = 2.0
    radius: Tuple[float, float] = (1.5, 3.0)
    intensity: Tuple[float, float] = (10.0, 20.0)
    background: float = 0.0
    seed: int = 0
    blobs: Optional[Tuple[Blob, ...]] = None

    def __post_init__(self):
        if self.kind not in ("moving-blob", "static-blobs", "mixed-scene"):
            raise ConfigError(f"unknown phantom kind {self.kind!r}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"bad phantom dims {self.dims}")


@dataclass
class Phantom:
    image: Stack
    moving: np.ndarray  # bool, per pixel of the stack
    static: np.ndarray
    blobs: Tuple[Blob, ...]


def _layout(spec: PhantomSpec) -> Tuple[Blob, ...]:
    if spec.blobs is not None:
        return spec.blobs
    rng = _rng(spec.seed, 1)
    n1, n2, _ = spec.dims
    counts = {"moving-blob": (0, 1), "static-blobs": (spec.n_static, 0),
              "mixed-scene": (spec.n_static, spec.n_moving)}[spec.kind]
    blobs = []
    for i in range(sum(counts)):
        moving = i >= counts[0]
        r = rng.uniform(*spec.radius)
        a = rng.uniform(*spec.intensity)
        c = (rng.uniform(0, n1), rng.uniform(0, n2))
        vel = (0.0, 0.0)
        if moving:
            th = rng.uniform(0, 2 * np.pi)
            vel = (spec.speed * math.sin(th), spec.speed * math.cos(th))
        blobs.append(Blob(c, r, a, vel))
    return tuple(blobs)


def _blob_frame(b: Blob, t: int, n1: int, n2: int) -> np.ndarray:
    cy = b.center[0] + b.velocity[0] * t
    cx = b.center[1] + b.velocity[1] * t
    yy = np.arange(n1)[:, None]
    xx = np.arange(n2)[None, :]
    # periodic distance so a blob leaving one edge re-enters on the other
    dy = (yy - cy + n1 / 2) % n1 - n1 / 2
    dx = (xx - cx + n2 / 2) % n2 - n2 / 2
    return b.intensity * np.exp(-(dy * dy + dx * dx) / (2 * b.radius * b.radius))


def make_phantom(spec: PhantomSpec) -> Phantom:
    """Deterministic blob scene plus boolean moving/static region masks.

    A pixel belongs to a region when a blob of that kind exceeds 10% of its
    peak there in that frame.
    """
    n1, n2, nf = spec.dims
    blobs = _layout(spec)
    img = np.full(spec.dims, float(spec.background))
    moving = np.zeros(spec.dims, dtype=bool)
    static = np.zeros(spec.dims, dtype=bool)
    for b in blobs:
        for t in range(nf):
            fr = _blob_frame(b, t, n1, n2)
            img[:, :, t] += fr
            mask = fr > 0.1 * b.intensity
            (moving if b.moving else static)[:, :, t] |= mask
    overlap = moving & static
    return Phantom(Stack(img), moving & ~overlap, static & ~overlap, blobs)


def reference_phantom(dims=(16, 16, 4)) -> Phantom:
    """Fixed unit-peak mixed scene: one static spot and one spot moving 2 px/frame along x."""
    n1, n2, _ = dims
    blobs = (Blob((n1 * 0.28, n2 * 0.3), 1.6, 1.0),
             Blob((n1 * 0.7, n2 * 0.15), 1.6, 1.0, (0.0, 2.0)))
    return make_phantom(PhantomSpec(kind="mixed-scene", dims=tuple(dims), blobs=blobs))


# --------------------------------------------------------------------------
# experiments

SOLVERS = ("staic", "ictv", "cst", "tv2_3d")

RESULT_COLUMNS = ("phantom", "na", "gamma_p", "solver", "lambda_or_alphas",
                  "snr_db", "ssim", "iters", "wall_ms")


# Default tuning grids: five (alpha_s, alpha_t) pairs spanning alpha_t/alpha_s
# from 1/4 to 1/2, and five lambda values on a doubling scale for each baseline.
STAIC_GRID = ((0.2, 0.1), (0.4, 0.1), (0.4, 0.2), (0.6, 0.3), (0.8, 0.2))
LAMBDA_GRID = (0.05, 0.1, 0.2, 0.4, 0.8)


@dataclass(frozen=True)
class ExperimentSpec:
    """Grid definition. Each solver is tuned over its own parameter grid.

    ``staic_grid`` holds ``(alpha_s, alpha_t)`` pairs; the baseline grids hold
    lambda values. The best SNR over the grid is reported per solver.
    """

    phantoms: Tuple[PhantomSpec, ...] = (PhantomSpec(),)
    nas: Tuple[float, ...] = (0.8, 0.9, 1.0, 1.1, 1.2)
    gammas: Tuple[float, ...] = (1.0, 5.0)
    solvers: Tuple[str, ...] = SOLVERS
    wavelength_px: float = 6.0
    kernel_radius: int = 6
    sigma_g_rel: float = 0.005
    staic_grid: Tuple[Tuple[float, float], ...] = STAIC_GRID
    lambda_grid: Dict[str, Tuple[float, ...]] = field(default_factory=lambda: {
        "ictv": LAMBDA_GRID, "cst": LAMBDA_GRID, "tv2_3d": LAMBDA_GRID})
    kappa1: float = 2.0
    kappa2: float = 0.5
    rho: float = 1.0
    max_iters: int = 300
    tol: float = 1e-4
    lb: float = 0.0
    seed: int = 0
    report_all: bool = False

    def __post_init__(self):
        for s in self.solvers:
            if s not in SOLVERS:
                raise ConfigError(f"unknown solver {s!r}; choose from {', '.join(SOLVERS)}")


def phantom_label(p: PhantomSpec, index: int) -> str:
    return f"{p.kind}-{index}"


def _run_solver(name: str, m: Stack, h: np.ndarray, param, spec: ExperimentSpec):
    common = dict(rho=spec.rho, max_iters=spec.max_iters, tol_primal=spec.tol,
                  tol_dual=spec.tol, lb=spec.lb)
    if name == "staic":
        return restore_staic(m, h, SolverConfig(alpha_s=param[0], alpha_t=param[1], **common))
    cfg = BaselineConfig(lam=param, kappa1=spec.kappa1, kappa2=spec.kappa2, **common)
    fn = {"ictv": restore_ictv, "cst": restore_cst, "tv2_3d": restore_tv2_3d}[name]
    return fn(m, h, cfg)


def _param_label(param) -> str:
    if isinstance(param, tuple):
        return "/".join(f"{p:g}" for p in param)
    return f"{param:g}"


def _cell_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1, np.uint64)[0])


def _cells(spec: ExperimentSpec):
    index = 0
    for pi, pspec in enumerate(spec.phantoms):
        for na in spec.nas:
            for gamma in spec.gammas:
                yield index, pi, pspec, na, gamma
                index += 1


def _run_cell(spec: ExperimentSpec, index: int, pi: int, pspec: PhantomSpec, na: float,
              gamma: float, progress=None) -> List[dict]:
    rows: List[dict] = []
    try:
        truth = make_phantom(pspec).image
        peak = float(truth.data.max())
        h = make_psf(PsfSpec(na, spec.wavelength_px, spec.kernel_radius))
        noise = NoiseSpec(gamma, spec.sigma_g_rel * peak, _cell_seed(spec.seed, index))
        m = corrupt(truth, h, noise)
    except StaicError as exc:
        for name in spec.solvers:
            rows.append({"phantom": phantom_label(pspec, pi), "na": na, "gamma_p": gamma,
                         "solver": name, "lambda_or_alphas": "", "snr_db": math.nan,
                         "ssim": math.nan, "iters": 0, "wall_ms": 0.0,
                         "error": f"simulation failed: {exc}"})
        return rows
    for name in spec.solvers:
        grid = spec.staic_grid if name == "staic" else spec.lambda_grid[name]
        scored = []
        for param in grid:
            t0 = time.perf_counter()
            row = {"phantom": phantom_label(pspec, pi), "na": na, "gamma_p": gamma,
                   "solver": name, "lambda_or_alphas": _param_label(param)}
            try:
                res = _run_solver(name, m, h, param, spec)
                row.update(snr_db=snr_db(truth, res.g), ssim=ssim_mean(truth, res.g),
                           iters=res.iterations, error="")
            except StaicError as exc:
                row.update(snr_db=math.nan, ssim=math.nan, iters=0, error=str(exc))
            row["wall_ms"] = (time.perf_counter() - t0) * 1e3
            scored.append(row)
            if progress:
                progress(f"{row['phantom']} na={na:g} gamma={gamma:g} {name} "
                         f"{row['lambda_or_alphas']} snr={row['snr_db']:.3f}")
        if spec.report_all:
            rows.extend(scored)
        else:
            ok = [r for r in scored if not math.isnan(r["snr_db"])]
            rows.append(max(ok, key=lambda r: r["snr_db"]) if ok else scored[0])
    return rows


def run_experiment(spec: ExperimentSpec, progress: Optional[Callable[[str], None]] = None,
                   threads: int = 1) -> List[dict]:
    """Simulate, restore and score every cell; one row per (cell, solver).

    With ``report_all`` every grid point gets a row; otherwise only the best
    SNR per solver. Failures are recorded in the row (``snr_db = nan``,
    ``error`` set) and the run continues. Each cell draws its noise from a
    seed derived from ``(spec.seed, cell index)``, so running cells on
    ``threads`` workers gives the same rows in the same order.
    """
    cells = list(_cells(spec))
    if threads <= 1 or len(cells) <= 1:
        per_cell = [_run_cell(spec, *c, progress=progress) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_cell = list(pool.map(lambda c: _run_cell(spec, *c, progress=progress), cells))
    return [row for rows in per_cell for row in rows]


def _fmt(col: str, v) -> str:
    if col in ("snr_db",):
        return f"{v:.4f}"
    if col == "ssim":
        return f"{v:.5f}"
    if col == "wall_ms":
        return f"{v:.1f}"
    if col in ("na", "gamma_p"):
        return f"{v:g}"
    return str(v)


def write_results_csv(rows: Sequence[dict], path=None, timing: bool = True) -> str:
    """Render result rows as CSV with the fixed column order.

    ``timing=False`` blanks ``wall_ms`` so the file is reproducible byte for
    byte across runs.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(c, r[c]) if (c != "wall_ms" or timing) else "" for c in RESULT_COLUMNS])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
