"""Reference regularizers solved with the same ADMM engine as STAIC.

* 3D-TV2: ``lam * sum_r ||(M g)(r)||_F`` (time treated as a third axis).
* CST: ``lam * (||M g||_{1,2} + ||d_tt g||_{1,2})``.
* ICTV-2DT: ``lam * min_v ||grad(g - v)||_{1,kappa1} + ||grad v||_{1,kappa2}`` with
  ``||y||_kappa = sqrt(kappa^2 (y_x^2 + y_y^2) + y_t^2)``. The kappa weighting is
  applied once, folded into the spatial gradient rows.

Only the bank and the penalty terms differ from the STAIC problem, so
iteration counts, stopping rule and initialization are shared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, TextIO, Tuple

from .errors import ConfigError
from .operators import (DELTA, DT, DTT, DX, DY, HESSIAN_3D, BankRow, OperatorBank,
                        psf_filter)
from .solver import (AdmmConfig, AdmmProblem, RestorationResult, Term, _m_array,
                     run_admm)
from .tensor import Stack

__all__ = [
    "BaselineConfig",
    "tv2_problem",
    "cst_problem",
    "ictv_problem",
    "restore_tv2_3d",
    "restore_cst",
    "restore_ictv",
]


@dataclass(frozen=True)
class BaselineConfig(AdmmConfig):
    lam: float = 0.05
    kappa1: float = 1.0
    kappa2: float = 0.25

    def __post_init__(self):
        super().__post_init__()
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if not (self.kappa1 > 0 and self.kappa2 > 0):
            raise ConfigError("kappa1 and kappa2 must be positive")


def tv2_problem(h, dims, cfg: BaselineConfig) -> AdmmProblem:
    rows = [BankRow.on(0, psf_filter(h), 1, "h")]
    rows += [BankRow.on(0, f, 1) for f in HESSIAN_3D]
    rows += [BankRow.on(0, DELTA, 1, "e_g")]
    terms = [Term("data", slice(0, 1)), Term("group", slice(1, 10), cfg.lam),
             Term("bound", slice(10, 11), lb=cfg.lb, ub=cfg.ub)]
    return AdmmProblem("tv2_3d", OperatorBank(tuple(rows), 1), terms, dims)


def cst_problem(h, dims, cfg: BaselineConfig) -> AdmmProblem:
    rows = [BankRow.on(0, psf_filter(h), 1, "h")]
    rows += [BankRow.on(0, f, 1) for f in HESSIAN_3D]
    rows += [BankRow.on(0, DTT, 1, "dtt_g"), BankRow.on(0, DELTA, 1, "e_g")]
    terms = [Term("data", slice(0, 1)), Term("group", slice(1, 10), cfg.lam),
             Term("group", slice(10, 11), cfg.lam),
             Term("bound", slice(11, 12), lb=cfg.lb, ub=cfg.ub)]
    return AdmmProblem("cst", OperatorBank(tuple(rows), 1), terms, dims)


def ictv_problem(h, dims, cfg: BaselineConfig,
                 v_bounds: Tuple[float, float] = (-math.inf, math.inf)) -> AdmmProblem:
    """Variables ``(g, v)``.

    The row ``e_v`` keeps the normal equations invertible at zero frequency,
    where neither gradient sees ``v``; with the default unbounded ``v_bounds``
    it adds no penalty.
    """
    k1, k2 = cfg.kappa1, cfg.kappa2
    rows = [BankRow("h", (psf_filter(h), None))]
    for d, k in ((DX, k1), (DY, k1), (DT, 1.0)):
        rows.append(BankRow(f"u_{d.name}", (d.scaled(k), d.scaled(-k))))
    for d, k in ((DX, k2), (DY, k2), (DT, 1.0)):
        rows.append(BankRow(f"v_{d.name}", (None, d.scaled(k))))
    rows += [BankRow("e_g", (DELTA, None)), BankRow("e_v", (None, DELTA))]
    terms = [Term("data", slice(0, 1)), Term("group", slice(1, 4), cfg.lam),
             Term("group", slice(4, 7), cfg.lam),
             Term("bound", slice(7, 8), lb=cfg.lb, ub=cfg.ub),
             Term("bound", slice(8, 9), lb=v_bounds[0], ub=v_bounds[1])]
    return AdmmProblem("ictv", OperatorBank(tuple(rows), 2), terms, dims)


def _restore(problem: AdmmProblem, m, cfg, log) -> RestorationResult:
    state, res, obj, conv = run_admm(problem, m, cfg, log)
    v = Stack(state.f[1]) if problem.n_components == 2 else None
    return RestorationResult(
        g=Stack(state.f[0]), v=v, iterations=state.iter, residual_history=res,
        objective_history=obj, converged=conv, solver=problem.name, state=state)


def restore_tv2_3d(m, h, cfg: BaselineConfig = BaselineConfig(),
                   log: Optional[TextIO] = None) -> RestorationResult:
    ma = _m_array(m)
    return _restore(tv2_problem(h, ma.shape, cfg), ma, cfg, log)


def restore_cst(m, h, cfg: BaselineConfig = BaselineConfig(),
                log: Optional[TextIO] = None) -> RestorationResult:
    ma = _m_array(m)
    return _restore(cst_problem(h, ma.shape, cfg), ma, cfg, log)


def restore_ictv(m, h, cfg: BaselineConfig = BaselineConfig(), log: Optional[TextIO] = None,
                 v_bounds: Tuple[float, float] = (-math.inf, math.inf)) -> RestorationResult:
    ma = _m_array(m)
    return _restore(ictv_problem(h, ma.shape, cfg, v_bounds), ma, cfg, log)
