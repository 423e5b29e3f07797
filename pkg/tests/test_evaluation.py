import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from splatmap import evaluation as E
from splatmap.datasets import Trajectory
from splatmap.errors import DimensionMismatch, EmptyMask, NoAssociations, TooFewPoses, TooSmall
from splatmap.geometry import CameraPose, quat_multiply


def traj(positions, rotations=None, t0=0.0):
    t = Trajectory()
    for i, p in enumerate(positions):
        q = [1.0, 0, 0, 0] if rotations is None else rotations[i]
        t.append(t0 + 0.1 * i, CameraPose(q, p))
    return t


def rigid(t, R, shift):
    q = Rotation.from_matrix(R).as_quat()[[3, 0, 1, 2]]
    out = Trajectory()
    for ts, p in t:
        out.append(ts, CameraPose(quat_multiply(q, p.rotation), R @ p.translation + shift))
    return out


def brute_ate(P, Q):
    """RMSE after the best rigid fit found by generic least squares from many starts."""
    best = np.inf
    for start in Rotation.random(20, random_state=0).as_rotvec():
        def res(x):
            return (Rotation.from_rotvec(x[:3]).apply(P) + x[3:] - Q).ravel()
        sol = least_squares(res, np.r_[start, Q.mean(0) - P.mean(0)], xtol=1e-15, ftol=1e-15, gtol=1e-15)
        best = min(best, np.sqrt(np.mean(np.sum(sol.fun.reshape(-1, 3) ** 2, 1))))
    return best


def test_identical_is_zero():
    gt = traj(np.random.default_rng(0).normal(size=(10, 3)))
    assert E.ate_rmse(gt, gt) == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 10_000))
def test_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    gt = traj(rng.normal(size=(12, 3)))
    est = traj(np.array(gt.positions()) + rng.normal(0, 0.05, (12, 3)))
    R = Rotation.random(random_state=seed).as_matrix()
    moved = rigid(est, R, rng.normal(0, 3, 3))
    assert abs(E.ate_rmse(moved, gt) - E.ate_rmse(est, gt)) <= 1e-9
    assert E.ate_rmse(rigid(gt, R, rng.normal(size=3)), gt) <= 1e-9


def test_displaced_square_matches_brute_force():
    Q = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    P = Q.copy()
    P[2] += [0.2, 0, 0]
    rmse = E.ate_rmse(traj(P), traj(Q))
    assert rmse == pytest.approx(brute_ate(P, Q), abs=1e-9)
    assert 0 < rmse < 0.2


def test_ate_errors():
    gt = traj(np.zeros((5, 3)))
    with pytest.raises(NoAssociations):
        E.ate_rmse(traj(np.zeros((5, 3)), t0=100.0), gt)
    with pytest.raises(TooFewPoses):
        E.ate_rmse(traj(np.zeros((2, 3))), gt)


def test_association_window_and_symmetry():
    a = [0.0, 0.1, 0.2, 0.3]
    b = [0.01, 0.11, 0.7, 0.29]
    pairs = E.associate(a, b, 0.02)
    assert pairs == [(0, 0), (1, 1), (3, 3)]
    assert sorted((j, i) for i, j in E.associate(b, a, 0.02)) == pairs
    assert E.associate(a, b, 0.02) == pairs


def test_psnr_examples():
    a = np.full((4, 4, 3), 0.3)
    assert math.isinf(E.psnr(a, a))
    assert E.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert E.psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(10 * np.log10(4), abs=1e-9)
    assert E.psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(DimensionMismatch):
        E.psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(0)
    img = rng.random((20, 20, 3))
    noise = rng.uniform(-1, 1, img.shape)
    vals = [E.psnr(img, img + amp * noise) for amp in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_examples():
    rng = np.random.default_rng(1)
    a = (rng.random((32, 32, 3)) > 0.5).astype(float)
    assert E.ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert E.ssim(a, 1 - a) < 0
    with pytest.raises(TooSmall):
        E.ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(DimensionMismatch):
        E.ssim(np.zeros((12, 12)), np.zeros((12, 13)))


@given(st.integers(0, 10_000))
def test_ssim_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert abs(E.ssim(a, b) - E.ssim(b, a)) <= 1e-12
    assert -1.0 <= E.ssim(a, b) <= 1.0


def test_depth_l1_examples():
    d = np.full((6, 6), 2.0)
    assert E.depth_l1(d, d) == 0.0
    assert E.depth_l1(d + 0.02, d) == pytest.approx(0.02, abs=1e-12)
    est = d.copy()
    est[:, :3] = 0.0
    est[:, 3:] += np.arange(3) * 0.1
    assert E.depth_l1(est, d) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(EmptyMask):
        E.depth_l1(np.zeros((3, 3)), d[:3, :3])
    with pytest.raises(DimensionMismatch):
        E.depth_l1(d, d[:3])


@given(st.integers(0, 10_000))
def test_depth_l1_triangle(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.uniform(0.5, 3, (8, 8)) for _ in range(3))
    assert E.depth_l1(a, c) <= E.depth_l1(a, b) + E.depth_l1(b, c) + 1e-12


def test_report_files(tmp_path):
    gt = traj(np.random.default_rng(2).normal(size=(6, 3)))
    rmse, errs, aligned, gpos = E.ate(gt, gt)
    rep = E.EvalReport(ate_rmse=rmse, translation_errors=list(errs), psnr=math.inf, frame_count=6)
    E.write_report(rep, tmp_path, aligned, gpos, gt.timestamps)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["psnr"] == "inf" and data["lpips"] == "n/a" and data["frame_count"] == 6
    assert (tmp_path / "trajectory.svg").read_text().lstrip().startswith("<?xml")
    assert len((tmp_path / "ate_per_frame.csv").read_text().splitlines()) == 7
