import io
import math

import cvxpy as cp
import numpy as np
import pytest

import dense
import oracles
from staic.errors import ConfigError, DivergenceError, SizeError
from staic.harness import reference_phantom
from staic.operators import CH_TT, DTT, convolve
from staic.prox import ProxParams, solve_w
from staic.solver import (AdmmState, SolverConfig, kkt_report, restore_staic, run_admm,
                          staic_objective, staic_problem, update_f, update_multiplier,
                          update_w)
from staic.tensor import PairStack, Stack, VectorStack

DIMS = (8, 8, 4)


def _kernel(rng, n=3):
    k = rng.uniform(0.2, 1.0, size=(n, n))
    return k / k.sum()


def _brute_objective(g, v, m, h, a_s, a_t):
    """Direct per-pixel summation with independently built stencils."""
    dims = g.shape
    D = dense.derivatives(dims)
    H = dense.blur(dims, h)
    gv, vv, mv = g.ravel(), v.ravel(), m.ravel()
    data = 0.5 * np.sum((H @ gv - mv) ** 2)
    u = gv - vv
    sp = np.stack([D["dxx"] @ u, D["dxy"] @ u, D["dxy"] @ u, D["dyy"] @ u, u])
    tt = np.stack([D[k] @ vv for k in ("dxx", "dyy", "dxy", "dxy", "dxt", "dxt", "dyt",
                                        "dyt", "dtt")])
    return data + a_s * np.sum(np.linalg.norm(sp, axis=0)) + a_t * np.sum(
        np.linalg.norm(tt, axis=0))


def test_objective_examples(rng):
    h = _kernel(rng)
    z = np.zeros(DIMS)
    assert staic_objective(PairStack(z, z), Stack(z), h, 0.3, 0.2) == 0.0
    g, v = rng.uniform(size=(2,) + DIMS)
    m = rng.normal(size=DIMS)
    misfit = 0.5 * np.sum((dense.blur(DIMS, h) @ g.ravel() - m.ravel()) ** 2)
    assert staic_objective(PairStack(g, v), m, h, 0.0, 0.0) == pytest.approx(misfit, rel=1e-12)
    for a_s, a_t in ((0.3, 0.0), (0.0, 0.7), (0.4, 0.9)):
        want = _brute_objective(g, v, m, h, a_s, a_t)
        got = staic_objective(PairStack(g, v), m, h, a_s, a_t)
        assert got == pytest.approx(want, rel=1e-12)
    assert staic_objective(PairStack(g - 1.0, v), m, h, 0.1, 0.1) == math.inf
    with pytest.raises(SizeError):
        staic_objective(PairStack(g, v), m[:, :, :2], h, 0.1, 0.1)


def _state_problem(rng, cfg, h=None):
    h = _kernel(rng) if h is None else h
    problem = staic_problem(h, DIMS, cfg)
    st = AdmmState.zeros(problem)
    st.f = rng.normal(size=st.f.shape)
    st.w = rng.normal(size=st.w.shape)
    st.beta = rng.normal(size=st.beta.shape)
    return st, problem


def _lagrangian(problem, st, w, m, rho):
    tf = problem.op.forward(st.f)
    return (problem.penalty(w, m) + np.vdot(st.beta, tf - w)
            + 0.5 * rho * np.sum((tf - w) ** 2))


def test_update_w(rng):
    cfg = SolverConfig(rho=1.7, alpha_s=0.3, alpha_t=0.5)
    problem = staic_problem(_kernel(rng), DIMS, cfg)
    zero = AdmmState.zeros(problem)
    assert not np.any(update_w(zero, np.zeros(DIMS), cfg, problem).data)
    for _ in range(5):
        st, problem = _state_problem(rng, cfg)
        m = rng.normal(size=DIMS)
        w = update_w(st, m, cfg, problem)
        x_bar = problem.op.forward(st.f) + st.beta / cfg.rho
        p = ProxParams(cfg.rho, cfg.alpha_s, cfg.alpha_t, cfg.lb, cfg.ub)
        direct = solve_w(VectorStack.from_channels_first(x_bar), m, p)
        assert np.array_equal(w.data, direct.data)
        # augmented Lagrangian does not increase (start from a feasible w)
        st.w = np.maximum(st.w, 0.0)
        before = _lagrangian(problem, st, st.w, m, cfg.rho)
        after = _lagrangian(problem, st, w.channels_first(), m, cfg.rho)
        assert after <= before + 1e-9


def test_update_f_exact(rng):
    cfg = SolverConfig(rho=1.0)
    for _ in range(5):
        st, problem = _state_problem(rng, cfg)
        op = problem.op
        f = update_f(st, cfg, problem).to_array()
        y = st.w - st.beta / cfg.rho
        rhs = op.adjoint(y)
        grad = op.adjoint(op.forward(f) - y)
        assert np.linalg.norm(grad) <= 1e-8 * np.linalg.norm(rhs)
        f0 = rng.normal(size=f.shape)
        st.w, st.beta = op.forward(f0), np.zeros_like(st.beta)
        assert np.max(np.abs(update_f(st, cfg, problem).to_array() - f0)) < 1e-8
    st.w, st.beta = np.zeros_like(st.w), np.zeros_like(st.beta)
    assert not np.any(np.abs(update_f(st, cfg, problem).to_array()) > 1e-15)


def test_update_f_matches_dense_least_squares(rng):
    dims = (4, 4, 3)
    h = _kernel(rng)
    problem = staic_problem(h, dims, SolverConfig())
    st = AdmmState.zeros(problem)
    st.w = rng.normal(size=st.w.shape)
    f = update_f(st, SolverConfig(), problem).to_array().ravel()
    D = dense.derivatives(dims)
    Z = np.zeros_like(D["I"])
    H = dense.blur(dims, h)
    sp = [D["dxx"], D["dxy"], D["dxy"], D["dyy"], D["I"]]
    tt = [D[k] for k in ("dxx", "dyy", "dxy", "dxy", "dxt", "dxt", "dyt", "dyt", "dtt")]
    rows = ([np.hstack([H, Z])] + [np.hstack([A, Z]) for A in sp]
            + [np.hstack([Z, A]) for A in sp] + [np.hstack([Z, A]) for A in tt]
            + [np.hstack([D["I"], Z]), np.hstack([Z, D["I"]])])
    T = np.vstack(rows)
    ref = np.linalg.lstsq(T, st.w.ravel(), rcond=None)[0]
    assert np.allclose(f, ref, atol=1e-10)


def test_update_multiplier(rng):
    cfg = SolverConfig(rho=2.5)
    st, problem = _state_problem(rng, cfg)
    tf = problem.op.forward(st.f)
    st.w = tf.copy()
    assert np.array_equal(update_multiplier(st, cfg, problem).channels_first(), st.beta)
    st.beta = np.zeros_like(st.beta)
    st.w = rng.normal(size=st.w.shape)
    assert np.allclose(update_multiplier(st, cfg, problem).channels_first(),
                       2.5 * (tf - st.w))
    with pytest.raises(ConfigError):
        SolverConfig(rho=0.0)


def test_zero_measurement_stays_zero(rng):
    res = restore_staic(np.zeros(DIMS), _kernel(rng), SolverConfig(max_iters=20))
    assert not np.any(res.g.data) and not np.any(res.v.data)
    assert res.g.dims == res.v.dims == DIMS


def test_constant_is_recovered():
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    res = restore_staic(np.full(DIMS, 4.0), delta,
                        SolverConfig(alpha_s=0.1, alpha_t=0.1, max_iters=2000,
                                     tol_primal=1e-7, tol_dual=1e-7))
    assert res.converged
    assert np.max(np.abs(res.g.data - 4.0)) < 1e-4


def _reference():
    ph = reference_phantom()
    h = np.array([[0.05, 0.1, 0.05], [0.1, 0.4, 0.1], [0.05, 0.1, 0.05]])
    from staic.operators import convolve_frames
    return ph, h, convolve_frames(ph.image, h)


def test_converges_on_reference_phantom():
    ph, h, m = _reference()
    cfg = SolverConfig(rho=1.0, alpha_s=0.05, alpha_t=0.05, max_iters=500)
    res = restore_staic(m, h, cfg)
    problem = staic_problem(h, m.dims, cfg)
    scale = problem.scale()
    assert res.converged and res.iterations <= 500
    rp, rd = res.residual_history[-1]
    assert rp <= 1e-4 * scale and rd <= 1e-4 * scale
    kkt = kkt_report(res.state, m, cfg, problem)
    assert kkt["w_certificate"] <= 1e-6 * scale
    assert kkt["f_gradient"] <= 1e-6 * scale
    assert len(res.objective_history) == res.iterations


def test_matches_conic_solver(rng):
    dims = (4, 4, 3)
    h = _kernel(rng)
    m = rng.uniform(0, 2, size=dims)
    a_s, a_t = 0.3, 0.2
    res = restore_staic(m, h, SolverConfig(alpha_s=a_s, alpha_t=a_t, max_iters=20000,
                                           tol_primal=1e-8, tol_dual=1e-8))
    D = dense.derivatives(dims)
    H = dense.blur(dims, h)
    n = int(np.prod(dims))
    g, v = cp.Variable(n), cp.Variable(n)
    u = g - v
    sp = cp.vstack([D["dxx"] @ u, D["dxy"] @ u, D["dxy"] @ u, D["dyy"] @ u, u])
    tt = cp.vstack([D[k] @ v for k in ("dxx", "dyy", "dxy", "dxy", "dxt", "dxt", "dyt",
                                       "dyt", "dtt")])
    obj = (0.5 * cp.sum_squares(H @ g - m.ravel()) + a_s * cp.sum(cp.norm(sp, 2, axis=0))
           + a_t * cp.sum(cp.norm(tt, 2, axis=0)))
    prob = oracles.solve(cp.Problem(cp.Minimize(obj), [g >= 0, v >= 0]))
    ours = staic_objective(PairStack(res.g.data, res.v.data).to_array().clip(0), m, h, a_s, a_t)
    assert ours == pytest.approx(prob.value, rel=1e-5)
    assert np.allclose(res.g.data.ravel(), g.value, atol=2e-3)


def test_log_lines(rng):
    buf = io.StringIO()
    res = restore_staic(rng.uniform(size=DIMS), _kernel(rng),
                        SolverConfig(max_iters=25, log_every=10), log=buf)
    lines = buf.getvalue().splitlines()
    assert [ln.split()[1] for ln in lines] == ["iter=10", "iter=20", "iter=25"]
    assert all(ln.startswith("solver=staic ") and "r_primal=" in ln for ln in lines)
    assert res.iterations == 25 and not res.converged


def test_divergence_names_iteration(rng, monkeypatch):
    cfg = SolverConfig(max_iters=10)
    problem = staic_problem(_kernel(rng), DIMS, cfg)
    real = problem.prox
    calls = {"n": 0}

    def poisoned(x, m, rho):
        calls["n"] += 1
        w = real(x, m, rho)
        if calls["n"] == 3:
            w[0, 0, 0, 0] = np.nan
        return w

    monkeypatch.setattr(problem, "prox", poisoned)
    with pytest.raises(DivergenceError) as info:
        run_admm(problem, rng.uniform(size=DIMS), cfg)
    assert info.value.iteration == 3


def test_deterministic(rng):
    m = rng.uniform(size=DIMS)
    h = _kernel(rng)
    a = restore_staic(m, h, SolverConfig(max_iters=30))
    b = restore_staic(m, h, SolverConfig(max_iters=30))
    assert a.g == b.g and a.v == b.v and a.residual_history == b.residual_history


def test_measurement_shape_checked(rng):
    with pytest.raises(SizeError):
        restore_staic(np.zeros((4, 4)), _kernel(rng))
