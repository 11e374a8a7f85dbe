import logging
import math

import numpy as np
import pytest

from staic.errors import ConfigError, DataError, SizeError
from staic.harness import (ExperimentSpec, NoiseSpec, PhantomSpec, PsfSpec, corrupt, fwhm,
                           make_phantom, make_psf, reference_phantom, run_experiment, snr_db,
                           ssim_frame, ssim_mean, write_results_csv, RESULT_COLUMNS)
from staic.operators import convolve_frames
from staic.tensor import Stack


def test_psf_basic():
    for na in (0.8, 1.0, 1.2):
        k = make_psf(PsfSpec(na, 6.0, 6))
        assert abs(k.sum() - 1.0) < 1e-12
        assert np.allclose(k, k.T) and np.allclose(k, k[::-1, ::-1])
        c = k.shape[0] // 2
        r0 = 0.61 * 6.0 / na
        lobe = k[c, c:c + int(math.floor(r0)) + 1]
        assert np.all(np.diff(lobe) < 0)


def test_first_zero_position():
    spec = PsfSpec(1.0, 8.0, 8)
    k = make_psf(spec)
    c = k.shape[0] // 2
    # radius 0.61 * 8 = 4.88 px: the central row dips near zero between samples 4 and 5
    row = k[c, c:]
    assert row[5] < 1e-3 * row[0]


def test_fwhm_shrinks_with_na():
    wide = fwhm(make_psf(PsfSpec(0.8, 8.0, 8)))
    narrow = fwhm(make_psf(PsfSpec(1.2, 8.0, 8)))
    assert narrow < wide
    # Airy FWHM is about 1.029 lambda / (2 NA) = 0.5145 lambda / NA
    assert wide == pytest.approx(0.5145 * 8.0 / 0.8, rel=0.08)


def test_psf_rejects_small_radius():
    with pytest.raises(ConfigError):
        make_psf(PsfSpec(0.8, 8.0, 3))
    with pytest.raises(ConfigError):
        PsfSpec(na=0.0)


def test_corrupt_zero_and_determinism(rng):
    h = make_psf(PsfSpec(1.0, 4.0, 3))
    z = np.zeros((8, 8, 3))
    assert not np.any(corrupt(z, h, NoiseSpec(1.0, 0.0, 5)).data)
    g = rng.uniform(0, 5, size=(8, 8, 3))
    a = corrupt(g, h, NoiseSpec(2.0, 0.1, 5))
    assert a == corrupt(g, h, NoiseSpec(2.0, 0.1, 5))
    assert a != corrupt(g, h, NoiseSpec(2.0, 0.1, 6))
    with pytest.raises(DataError):
        corrupt(-g, h, NoiseSpec())


def test_poisson_limit_shrinks_like_inverse_sqrt_gamma(rng):
    h = make_psf(PsfSpec(1.0, 4.0, 3))
    g = rng.uniform(1, 5, size=(12, 12, 2))
    clean = convolve_frames(g, h).data
    dev = {}
    for gamma in (1.0, 16.0, 256.0):
        dev[gamma] = np.mean([np.mean(np.abs(corrupt(g, h, NoiseSpec(gamma, 0.0, s)).data - clean))
                              for s in range(20)])
    assert dev[16.0] / dev[1.0] == pytest.approx(0.25, rel=0.15)
    assert dev[256.0] / dev[16.0] == pytest.approx(0.25, rel=0.15)


def test_poisson_variance_on_constant_stack():
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    g = np.full((8, 8, 2), 10.0)
    samples = np.stack([corrupt(g, delta, NoiseSpec(1.0, 0.0, s)).data for s in range(200)])
    var = samples.var(axis=0, ddof=1).mean()
    assert var == pytest.approx(10.0, rel=0.15)
    assert samples.mean() == pytest.approx(10.0, rel=0.02)


def test_gaussian_part(rng):
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    g = np.full((32, 32, 4), 1000.0)
    out = corrupt(g, delta, NoiseSpec(1e6, 2.0, 1)).data
    assert out.std() == pytest.approx(2.0, rel=0.05)


def test_snr_examples(rng):
    t = rng.normal(size=(8, 8, 2))
    assert snr_db(t, t) == math.inf
    assert snr_db(t, np.zeros_like(t)) == pytest.approx(0.0, abs=1e-12)
    e = rng.normal(size=t.shape)
    gain = snr_db(t, t + e / math.sqrt(2)) - snr_db(t, t + e)
    assert abs(gain - 3.0103) < 1e-3
    assert snr_db(t, t + 1e-9 * e) > 150
    with pytest.raises(SizeError):
        snr_db(t, t[:, :, :1])


def _window_ssim(x, y, L):
    """One 8x8 window written straight from the SSIM definition."""
    n = x.size
    mx, my = x.sum() / n, y.sum() / n
    vx = ((x - mx) ** 2).sum() / n
    vy = ((y - my) ** 2).sum() / n
    cxy = ((x - mx) * (y - my)).sum() / n
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    return (2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def test_ssim_single_window_oracle(rng):
    x = rng.uniform(0, 1, size=(8, 8))
    y = x + 0.2 * rng.normal(size=(8, 8))
    L = x.max() - x.min()
    assert abs(ssim_frame(x, y, L) - _window_ssim(x, y, L)) < 1e-10
    assert abs(ssim_mean(x[:, :, None], y[:, :, None]) - _window_ssim(x, y, L)) < 1e-10


def test_ssim_properties(rng):
    a = rng.uniform(size=(12, 10, 3))
    assert ssim_mean(a, a) == 1.0
    for _ in range(10):
        b = a + rng.normal(scale=0.3, size=a.shape)
        c = rng.uniform(size=a.shape)
        s = ssim_mean(b, c)
        assert -1 < s <= 1
        # symmetric when both share the same data range
        assert ssim_frame(b[:, :, 0], c[:, :, 0], 1.0) == pytest.approx(
            ssim_frame(c[:, :, 0], b[:, :, 0], 1.0), abs=1e-14)
    with pytest.raises(SizeError):
        ssim_mean(a[:4], a[:4])


def test_ssim_constant_frame_fallback(caplog):
    a = np.zeros((8, 8, 2))
    b = np.full((8, 8, 2), 0.1)
    with caplog.at_level(logging.WARNING):
        s = ssim_mean(a, b)
    assert "constant truth frame" in caplog.text
    c1 = 0.01 ** 2
    assert s == pytest.approx(c1 / (0.01 + c1), rel=1e-12)


def test_phantoms():
    st = make_phantom(PhantomSpec(kind="static-blobs", dims=(24, 24, 5), seed=2))
    for t in range(1, 5):
        assert np.array_equal(st.image.data[:, :, t], st.image.data[:, :, 0])
    assert not st.moving.any() and st.static.any()
    mv = make_phantom(PhantomSpec(kind="moving-blob", dims=(48, 48, 5), speed=2.0, seed=4,
                                  radius=(2.0, 2.0)))
    (b,) = mv.blobs
    yy, xx = np.mgrid[0:48, 0:48]
    prev = None
    for t in range(5):
        fr = mv.image.data[:, :, t]
        # circular centroid, robust to wraparound
        ang = lambda grid, n: np.angle(np.sum(fr * np.exp(2j * np.pi * grid / n))) * n / (2 * np.pi)
        c = np.array([ang(yy, 48), ang(xx, 48)])
        if prev is not None:
            step = (c - prev + 24) % 48 - 24
            assert np.allclose(step, b.velocity, atol=1e-6)
        prev = c
    assert make_phantom(PhantomSpec(seed=9)).image == make_phantom(PhantomSpec(seed=9)).image
    with pytest.raises(ConfigError):
        PhantomSpec(kind="nope")


def test_reference_phantom_masks():
    ph = reference_phantom()
    assert ph.image.dims == (16, 16, 4)
    assert ph.moving.any() and ph.static.any()
    assert not (ph.moving & ph.static).any()
    assert 0.9 < ph.image.data.max() <= 1.0 + 1e-12


SMALL = dict(phantoms=(PhantomSpec(dims=(16, 16, 4), seed=1),), max_iters=15,
             wavelength_px=4.0, kernel_radius=3)


def test_experiment_rows_and_determinism():
    one = run_experiment(ExperimentSpec(nas=(1.0,), gammas=(1.0,), solvers=("staic",), **SMALL))
    assert len(one) == 1 and one[0]["iters"] == 15
    spec = ExperimentSpec(nas=(1.0, 1.2), gammas=(1.0, 5.0), solvers=("staic",), **SMALL)
    rows = run_experiment(spec)
    assert len(rows) == 4
    a = write_results_csv(rows, timing=False)
    assert a == write_results_csv(run_experiment(spec), timing=False)
    assert a == write_results_csv(run_experiment(spec, threads=3), timing=False)
    assert a.splitlines()[0] == ",".join(RESULT_COLUMNS)


def test_experiment_grid_and_failures():
    spec = ExperimentSpec(nas=(1.0,), gammas=(1.0,), solvers=("tv2_3d", "cst"),
                          lambda_grid={"tv2_3d": (0.05, 0.5), "cst": (0.1,)}, report_all=True,
                          **SMALL)
    rows = run_experiment(spec)
    assert [r["lambda_or_alphas"] for r in rows] == ["0.05", "0.5", "0.1"]
    # a frame too small for the PSF makes every cell fail, but the run completes
    bad = ExperimentSpec(phantoms=(PhantomSpec(dims=(4, 4, 4)),), nas=(1.0,), gammas=(1.0,),
                         solvers=("staic", "cst"), wavelength_px=4.0, kernel_radius=3,
                         max_iters=5)
    rows = run_experiment(bad)
    assert len(rows) == 2 and all(r["error"] and math.isnan(r["snr_db"]) for r in rows)
    with pytest.raises(ConfigError):
        ExperimentSpec(solvers=("fista",))
