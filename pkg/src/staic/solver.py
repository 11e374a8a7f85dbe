"""ADMM restoration with the spatio-temporal adaptive infimal convolution prior.

The unknown is ``f = (g, v)``. With ``T`` the stacked operator of
:func:`staic.operators.staic_bank` the problem is

    min_f  1/2 sum_i ||h * g_i - m_i||^2
           + sqrt(2) alpha_s sum_{i,k} ||A_s (T_s f_i)(k)||_2
           + alpha_t sum_r ||(T_t f)(r)||_2  +  indicator(lb <= f <= ub)

split as ``T f = w`` and iterated as

    w    <- prox(T f + beta / rho)                (pixel-wise, closed form)
    f    <- argmin 1/2 ||T f - (w - beta / rho)||^2   (exact, per DFT frequency)
    beta <- beta + rho (T f - w)

starting from ``f = w = beta = 0``. The same engine, driven by a different
bank and list of penalty terms, runs the baseline regularizers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence, TextIO, Tuple

import numpy as np

from . import prox as px
from .errors import ConfigError, DivergenceError, SizeError
from .operators import (CH_E, CH_H, CH_TS, CH_TT, BankOperator, OperatorBank,
                        staic_bank)
from .tensor import PairStack, Stack, VectorStack

__all__ = [
    "AdmmConfig",
    "SolverConfig",
    "Term",
    "AdmmProblem",
    "AdmmState",
    "RestorationResult",
    "staic_problem",
    "staic_objective",
    "update_w",
    "update_f",
    "update_multiplier",
    "kkt_report",
    "run_admm",
    "restore_staic",
]


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 1.0
    max_iters: int = 500
    tol_primal: float = 1e-4
    tol_dual: float = 1e-4
    lb: float = 0.0
    ub: float = math.inf
    log_every: int = 0

    def __post_init__(self):
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ConfigError(f"max_iters must be a positive integer, got {self.max_iters}")
        if not (self.tol_primal > 0 and self.tol_dual > 0):
            raise ConfigError("tolerances must be positive")
        if not self.lb <= self.ub:
            raise ConfigError(f"lb {self.lb} exceeds ub {self.ub}")
        if self.log_every < 0:
            raise ConfigError("log_every must be nonnegative")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class SolverConfig(AdmmConfig):
    alpha_s: float = 0.05
    alpha_t: float = 0.05

    def __post_init__(self):
        super().__post_init__()
        if self.alpha_s < 0 or self.alpha_t < 0:
            raise ConfigError("alpha_s and alpha_t must be nonnegative")


@dataclass(frozen=True)
class Term:
    """A separable penalty on a block of ``w`` channels.

    ``kind`` is one of ``data`` (least-squares fit to m), ``group`` (weighted
    l2 norm of the channel vector), ``spatial`` (the ``A_s`` norm),
    ``bound`` (box constraint per channel) or ``free`` (no penalty).
    """

    kind: str
    channels: slice
    weight: float = 0.0
    lb: float = -math.inf
    ub: float = math.inf

    def __post_init__(self):
        if self.kind not in ("data", "group", "spatial", "bound", "free"):
            raise ValueError(f"unknown term kind {self.kind!r}")


def _vec(a: np.ndarray) -> np.ndarray:
    return np.moveaxis(a, 0, -1)


def _unvec(a: np.ndarray) -> np.ndarray:
    return np.moveaxis(a, -1, 0)


class AdmmProblem:
    """A bank ``T`` plus the penalty terms acting on ``w = T f``."""

    def __init__(self, name: str, bank: OperatorBank, terms: Sequence[Term], dims):
        self.name = name
        self.bank = bank
        self.terms = tuple(terms)
        self.dims = tuple(int(d) for d in dims)
        self.op: BankOperator = bank.operator(self.dims)
        covered = np.zeros(bank.n_channels, dtype=int)
        for t in self.terms:
            covered[t.channels] += 1
        if not np.all(covered == 1):
            raise ValueError(f"terms must cover each of the {bank.n_channels} channels once")

    @property
    def n_channels(self):
        return self.bank.n_channels

    @property
    def n_components(self):
        return self.bank.n_components

    def scale(self) -> float:
        return math.sqrt(self.n_channels * int(np.prod(self.dims)))

    def prox(self, x: np.ndarray, m: np.ndarray, rho: float) -> np.ndarray:
        w = np.empty_like(x)
        for t in self.terms:
            xs = x[t.channels]
            if t.kind == "data":
                w[t.channels] = px.prox_data(xs, m, rho)
            elif t.kind == "group":
                w[t.channels] = px.prox_group(xs, t.weight, rho, axis=0)
            elif t.kind == "spatial":
                w[t.channels] = px.prox_spatial(xs, t.weight, rho, axis=0)
            elif t.kind == "bound":
                w[t.channels] = px.prox_bound(xs, t.lb, t.ub)
            else:
                w[t.channels] = xs
        return w

    def penalty(self, w: np.ndarray, m: np.ndarray) -> float:
        """Sum of the finite penalty terms (the box indicator is left out)."""
        total = 0.0
        for t in self.terms:
            ws = w[t.channels]
            if t.kind == "data":
                total += 0.5 * float(np.sum((ws[0] - m) ** 2))
            elif t.kind == "group" and t.weight:
                total += t.weight * float(np.sum(np.sqrt(np.sum(ws * ws, axis=0))))
            elif t.kind == "spatial" and t.weight:
                d = ws[:5] - ws[5:]  # sqrt(2) A_s z
                total += t.weight * float(np.sum(np.sqrt(np.sum(d * d, axis=0))))
        return total

    def feasible(self, w: np.ndarray) -> bool:
        for t in self.terms:
            if t.kind == "bound":
                ws = w[t.channels]
                if np.any(ws < t.lb) or np.any(ws > t.ub):
                    return False
        return True

    def certificate(self, w: np.ndarray, x: np.ndarray, m: np.ndarray, rho: float) -> float:
        """l2 norm over all pixels of the pixel-wise prox optimality residuals."""
        sq = 0.0
        for t in self.terms:
            ws, xs = w[t.channels], x[t.channels]
            if t.kind == "data":
                r = px.data_residual(ws[0], xs[0], m, rho)
            elif t.kind == "group":
                r = px.group_residual(_vec(ws), _vec(xs), t.weight, rho)
            elif t.kind == "spatial":
                r = px.spatial_residual(_vec(ws), _vec(xs), t.weight, rho)
            elif t.kind == "bound":
                r = px.bound_residual(ws, xs, t.lb, t.ub, rho)
            else:
                r = rho * (xs - ws)
            sq += float(np.sum(np.square(r)))
        return math.sqrt(sq)


def staic_problem(h, dims, cfg: SolverConfig) -> AdmmProblem:
    # spatial weight alpha_s: the penalty is alpha_s ||z[:5] - z[5:]|| = sqrt(2) alpha_s ||A_s z||
    terms = [
        Term("data", slice(CH_H, CH_H + 1)),
        Term("spatial", CH_TS, cfg.alpha_s),
        Term("group", CH_TT, cfg.alpha_t),
        Term("bound", CH_E, lb=cfg.lb, ub=cfg.ub),
    ]
    return AdmmProblem("staic", staic_bank(h), terms, dims)


@dataclass
class AdmmState:
    """Iterates of one ADMM run; arrays are channel-first.

    ``x_bar`` and ``y`` are the points the last w- and f-updates were solved
    for, kept so the optimality of the returned iterate can be audited.
    """

    f: np.ndarray
    w: np.ndarray
    beta: np.ndarray
    iter: int = 0
    r_primal: float = 0.0
    r_dual: float = 0.0
    x_bar: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, problem: AdmmProblem) -> "AdmmState":
        fshape = (problem.n_components,) + problem.dims
        wshape = (problem.n_channels,) + problem.dims
        return cls(np.zeros(fshape), np.zeros(wshape), np.zeros(wshape))

    @property
    def pair(self) -> PairStack:
        return PairStack.from_array(self.f)

    @property
    def w_stack(self) -> VectorStack:
        return VectorStack.from_channels_first(self.w)

    @property
    def beta_stack(self) -> VectorStack:
        return VectorStack.from_channels_first(self.beta)


@dataclass
class RestorationResult:
    g: Stack
    v: Optional[Stack]
    iterations: int
    residual_history: List[Tuple[float, float]] = field(default_factory=list)
    objective_history: List[float] = field(default_factory=list)
    converged: bool = False
    solver: str = "staic"
    state: Optional[AdmmState] = field(default=None, repr=False)


def _m_array(m) -> np.ndarray:
    a = m.data if isinstance(m, Stack) else np.asarray(m, dtype=np.float64)
    if a.ndim != 3:
        raise SizeError(f"measurement must be a 3D stack, got shape {a.shape}")
    return a


def _f_array(f) -> np.ndarray:
    if isinstance(f, PairStack):
        return f.to_array()
    if isinstance(f, Stack):
        return f.data[None]
    return np.asarray(f, dtype=np.float64)


# --------------------------------------------------------------------------
# objective


def staic_objective(f, m, h, alpha_s, alpha_t, lb=0.0, ub=math.inf) -> float:
    """Full cost of ``f = (g, v)``; ``inf`` outside the box ``[lb, ub]``."""
    fa = _f_array(f)
    ma = _m_array(m)
    if fa.shape != (2,) + ma.shape:
        raise SizeError(f"f shape {fa.shape} does not match measurement {ma.shape}")
    cfg = SolverConfig(alpha_s=alpha_s, alpha_t=alpha_t, lb=lb, ub=ub)
    problem = staic_problem(h, ma.shape, cfg)
    if np.any(fa < lb) or np.any(fa > ub):
        return math.inf
    return problem.penalty(problem.op.forward(fa), ma)


# --------------------------------------------------------------------------
# single steps


def _w_step(state: AdmmState, m: np.ndarray, rho: float, problem: AdmmProblem):
    x_bar = problem.op.forward(state.f) + state.beta / rho
    return problem.prox(x_bar, m, rho), x_bar


def update_w(state: AdmmState, m, cfg: AdmmConfig, problem: AdmmProblem) -> VectorStack:
    """Minimize the augmented Lagrangian over ``w`` at fixed ``f`` and ``beta``."""
    w, _ = _w_step(state, _m_array(m), cfg.rho, problem)
    return VectorStack.from_channels_first(w)


def update_f(state: AdmmState, cfg: AdmmConfig, problem: AdmmProblem):
    """Exact minimizer of ``1/2 ||T f - (w - beta/rho)||^2`` using ``state.w``."""
    y = state.w - state.beta / cfg.rho
    f = problem.op.least_squares(y)
    return PairStack.from_array(f) if problem.n_components == 2 else Stack(f[0], copy=False)


def update_multiplier(state: AdmmState, cfg: AdmmConfig, problem: AdmmProblem) -> VectorStack:
    """``beta + rho (T f - w)``."""
    beta = state.beta + cfg.rho * (problem.op.forward(state.f) - state.w)
    return VectorStack.from_channels_first(beta)


def kkt_report(state: AdmmState, m, cfg: AdmmConfig, problem: AdmmProblem) -> dict:
    """Optimality measures of the last iterate.

    ``w_certificate``: prox optimality of ``w`` for the point it was computed
    from. ``f_gradient``: norm of ``T^T (T f - y)``. ``fixed_point``:
    ``||w - prox(T f + beta/rho)||``, which vanishes only at a saddle point.
    """
    ma = _m_array(m)
    op = problem.op
    tf = op.forward(state.f)
    x_bar = state.x_bar if state.x_bar is not None else tf + state.beta / cfg.rho
    y = state.y if state.y is not None else state.w - state.beta / cfg.rho
    fixed = problem.prox(tf + state.beta / cfg.rho, ma, cfg.rho)
    return {
        "w_certificate": problem.certificate(state.w, x_bar, ma, cfg.rho),
        "f_gradient": float(np.linalg.norm(op.adjoint(tf - y))),
        "primal": float(np.linalg.norm(tf - state.w)),
        "fixed_point": float(np.linalg.norm(state.w - fixed)),
        "scale": problem.scale(),
    }


# --------------------------------------------------------------------------
# main loop


def _log_line(name, k, obj, rp, rd):
    return f"solver={name} iter={k:d} J={obj:.6f} r_primal={rp:.9f} r_dual={rd:.9f}\n"


def run_admm(problem: AdmmProblem, m, cfg: AdmmConfig, log: Optional[TextIO] = None):
    """Iterate until both residuals drop below ``tol * scale`` or ``max_iters``.

    Returns ``(state, residual_history, objective_history, converged)``.
    """
    ma = _m_array(m)
    if ma.shape != problem.dims:
        raise SizeError(f"measurement {ma.shape} does not match problem dims {problem.dims}")
    op = problem.op
    rho = cfg.rho
    scale = problem.scale()
    state = AdmmState.zeros(problem)
    tf = np.zeros_like(state.w)
    residuals: List[Tuple[float, float]] = []
    objective: List[float] = []
    converged = False
    for k in range(1, int(cfg.max_iters) + 1):
        beta = state.beta
        x_bar = tf + beta / rho
        w = problem.prox(x_bar, ma, rho)
        y = w - beta / rho
        f = op.least_squares(y)
        tf = op.forward(f)

        r = tf - w
        r_primal = float(np.linalg.norm(r))
        r_dual = rho * float(np.linalg.norm(op.adjoint(w - state.w)))
        if not (math.isfinite(r_primal) and math.isfinite(r_dual)):
            raise DivergenceError(k)

        state.f, state.w, state.beta = f, w, beta + rho * r
        state.x_bar, state.y = x_bar, y
        state.iter, state.r_primal, state.r_dual = k, r_primal, r_dual
        obj = problem.penalty(tf, ma)
        residuals.append((r_primal, r_dual))
        objective.append(obj)
        if log is not None and cfg.log_every and k % cfg.log_every == 0:
            log.write(_log_line(problem.name, k, obj, r_primal, r_dual))
        if r_primal <= cfg.tol_primal * scale and r_dual <= cfg.tol_dual * scale:
            converged = True
            break
    if log is not None and cfg.log_every and state.iter % cfg.log_every != 0:
        log.write(_log_line(problem.name, state.iter, objective[-1], state.r_primal, state.r_dual))
    return state, residuals, objective, converged


def restore_staic(m, h, cfg: SolverConfig = SolverConfig(), log: Optional[TextIO] = None
                  ) -> RestorationResult:
    """Restore a blurred, noisy 2D+time stack; returns ``g`` and its smooth part ``v``."""
    ma = _m_array(m)
    problem = staic_problem(h, ma.shape, cfg)
    state, res, obj, conv = run_admm(problem, ma, cfg, log)
    return RestorationResult(
        g=Stack(state.f[0]), v=Stack(state.f[1]), iterations=state.iter,
        residual_history=res, objective_history=obj, converged=conv,
        solver="staic", state=state)
