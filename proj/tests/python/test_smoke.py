import os
from pathlib import Path

import numpy as np
import pytest

import featspace as fs

CONFIGS = Path(__file__).resolve().parents[2] / "configs"


def rand_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_nufft_matches_numpy_dft():
    rng = np.random.default_rng(0)
    side = 16
    img = rand_complex(rng, side * side)
    pts = rng.uniform(-0.5, 0.5, size=(200, 2))
    # Independent numpy evaluation of sum_x img(x) exp(-2 pi i k.x), centre at side/2.
    y, x = np.divmod(np.arange(side * side), side)
    phase = -2j * np.pi * (np.outer(pts[:, 0], x - side // 2) + np.outer(pts[:, 1], y - side // 2))
    ref = np.exp(phase) @ img
    fast = fs.nufft_forward(side, img, pts)
    assert np.max(np.abs(fast - ref)) / np.max(np.abs(ref)) <= 1e-3
    assert np.allclose(fs.direct_dft(side, img, pts), ref, rtol=0, atol=1e-9 * np.abs(ref).max())


def test_adjoint_identity():
    rng = np.random.default_rng(1)
    traj = fs.golden_angle_trajectory(24, 11, 5, navigator_every=4)
    maps = fs.coil_maps(12, 3)
    q, _ = np.linalg.qr(rand_complex(rng, 5, 3))
    phi = q.conj().T
    u = rand_complex(rng, 144, 3)
    d = rand_complex(rng, traj.n_spokes * 11, 3)
    lhs = np.vdot(fs.encode(u, phi, maps, traj), d)
    rhs = np.vdot(u, fs.backproject(d, phi, maps, traj, exact_adjoint=True))
    assert abs(lhs - rhs) <= 1e-9 * np.linalg.norm(u) * np.linalg.norm(d)


def test_basis_truncation_against_numpy_svd():
    rng = np.random.default_rng(2)
    a = rand_complex(rng, 256, 64)
    phi = fs.extract_basis(a, 8, 64)
    assert phi.shape == (8, 64)
    assert np.allclose(phi @ phi.conj().T, np.eye(8), atol=1e-12)
    s = np.linalg.svd(a, compute_uv=False)
    residual = np.linalg.norm(a - fs.project(a, phi) @ phi) ** 2
    assert residual == pytest.approx(np.sum(s[8:] ** 2), rel=1e-8)
    assert np.allclose(fs.singular_values(a), s, rtol=1e-10)


def test_haar_and_threshold():
    rng = np.random.default_rng(3)
    u = rand_complex(rng, 32 * 32, 2)
    c = fs.haar_forward(u, 32, 3)
    assert np.linalg.norm(c) == pytest.approx(np.linalg.norm(u), rel=1e-12)
    assert np.allclose(fs.haar_adjoint(c, 32, 3), u, atol=1e-12)
    t = fs.soft_threshold(np.array([[3 + 4j, 0.5]]), 2.5)
    assert t[0, 0] == 1.5 + 2j and t[0, 1] == 0
    with pytest.raises(ValueError):
        fs.soft_threshold(np.array([[1.0 + 0j]]), -1.0)


def test_metrics_and_fits():
    rng = np.random.default_rng(4)
    ref = rand_complex(rng, 100, 3)
    assert fs.nrmse(ref, ref) == 0.0
    assert fs.nrmse(2 * ref, ref) == pytest.approx(1.0)
    assert fs.psnr(ref, ref) == float("inf")
    img = rng.uniform(size=(32, 32))
    assert fs.ssim(img, img) == pytest.approx(1.0)
    tau = np.linspace(0, 1250, 40)
    sig = 1.0 - 2.0 * np.exp(-tau / 500.0)
    fit = fs.fit_ir_curve(tau, sig)
    assert fit["valid"] and fit["t1"] == pytest.approx(500.0, rel=1e-2)
    a = rng.uniform(800, 1800, 50).round()
    ba = fs.bland_altman(a, a + 50)
    assert ba["bias"] == pytest.approx(50.0)
    assert ba["loa_upper"] - ba["loa_lower"] == pytest.approx(0.0, abs=1e-9)


def test_pipeline_stage_and_artifacts(tmp_path):
    assert fs.STAGES[0] == "phantom" and fs.STAGES[-1] == "eval"
    out = tmp_path / "run"
    with pytest.raises(RuntimeError):
        fs.run_stage("acquire", CONFIGS / "smoke.cfg", out)
    fs.run_stage("run-all", CONFIGS / "smoke.cfg", out)
    for stage in fs.STAGES:
        for name in fs.stage_outputs(stage):
            assert (out / name).exists(), name
    u0 = fs.read_array(out / "u0.fsa")
    assert u0.dtype == np.complex128 and u0.shape == (32 * 32, 4)
    assert fs.read_attributes(out / "u0.fsa")["grid_size"] == 32
    with pytest.raises(ValueError):
        fs.run_stage("phantom", CONFIGS / "smoke.cfg", tmp_path / "x", {"no_such_key": "1"})
    with pytest.raises(OSError):
        fs.read_array(tmp_path / "absent.fsa")
