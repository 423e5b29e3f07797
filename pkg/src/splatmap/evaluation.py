"""Trajectory and image metrics: ATE RMSE, PSNR, SSIM, depth L1."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionMismatch, EmptyMask, NoAssociations, TooFewPoses, TooSmall


@dataclass
class EvalReport:
    ate_rmse: float | None = None
    translation_errors: list = field(default_factory=list)
    psnr: float | None = None
    ssim: float | None = None
    depth_l1: float | None = None
    lpips: str = "n/a"
    frame_count: int = 0
    fps: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        if d["psnr"] is not None and math.isinf(d["psnr"]):
            d["psnr"] = "inf"
        return d

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)


def associate(ts_a, ts_b, max_dt=0.02):
    """Greedy nearest-timestamp matching; each entry is used at most once.

    Candidate pairs are visited by increasing time difference (ties by
    index), so the result does not depend on argument order beyond the
    pair orientation.
    """
    ts_a = np.asarray(ts_a, dtype=np.float64)
    ts_b = np.asarray(ts_b, dtype=np.float64)
    if len(ts_a) == 0 or len(ts_b) == 0:
        return []
    diff = np.abs(ts_a[:, None] - ts_b[None, :])
    ia, ib = np.nonzero(diff <= max_dt)
    order = np.lexsort((ib, ia, diff[ia, ib]))
    used_a, used_b, pairs = set(), set(), []
    for k in order:
        a, b = int(ia[k]), int(ib[k])
        if a in used_a or b in used_b:
            continue
        used_a.add(a)
        used_b.add(b)
        pairs.append((a, b))
    pairs.sort()
    return pairs


def align_rigid(src, dst):
    """Least-squares rotation and translation mapping ``src`` onto ``dst``
    (both (N, 3)); no scale."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        S[2, 2] = -1.0
    R = Vt.T @ S @ U.T
    return R, mu_d - R @ mu_s


def ate(est, gt, max_dt=0.02):
    """Returns (rmse, per-pair errors, aligned estimate positions, gt positions)."""
    pairs = associate(est.timestamps, gt.timestamps, max_dt)
    if not pairs:
        raise NoAssociations("no estimated pose within the association window of ground truth")
    if len(pairs) < 3:
        raise TooFewPoses(f"need at least 3 associated poses, got {len(pairs)}")
    P = np.array([est.poses[a].translation for a, _ in pairs])
    Q = np.array([gt.poses[b].translation for _, b in pairs])
    R, t = align_rigid(P, Q)
    aligned = P @ R.T + t
    err = np.linalg.norm(aligned - Q, axis=1)
    return float(np.sqrt(np.mean(err * err))), err, aligned, Q


def ate_rmse(est, gt, max_dt=0.02):
    return ate(est, gt, max_dt)[0]


def _check_same(a, b):
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape {a.shape} vs {b.shape}")


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a, b, sigma=1.5, win=11, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM with a Gaussian window, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    if a.shape[0] < win or a.shape[1] < win:
        raise TooSmall(f"images must be at least {win}x{win}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    radius = win // 2
    filt = lambda x: gaussian_filter(x, sigma, truncate=radius / sigma)
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s[radius:-radius, radius:-radius].mean())
    return float(np.mean(vals))


def depth_l1(est, gt, mask=None):
    """Mean absolute depth error over pixels valid (> 0, finite) in both."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same(est, gt)
    valid = np.isfinite(est) & np.isfinite(gt) & (est > 0) & (gt > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise EmptyMask("no pixel valid in both depth maps")
    return float(np.mean(np.abs(est[valid] - gt[valid])))


def write_report(report: EvalReport, out_dir, aligned=None, gt_positions=None, timestamps=None):
    """JSON report, per-frame error CSV and an SVG trajectory overlay."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    if report.translation_errors:
        with open(out_dir / "ate_per_frame.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["pair", "timestamp", "translation_error_m"])
            for i, e in enumerate(report.translation_errors):
                ts = "" if timestamps is None else f"{timestamps[i]:.6f}"
                w.writerow([i, ts, f"{e:.9f}"])
    if aligned is not None and gt_positions is not None:
        _trajectory_svg(out_dir / "trajectory.svg", np.asarray(aligned), np.asarray(gt_positions))


def _trajectory_svg(path, est, gt):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(gt[:, 0], gt[:, 2], "k-", label="ground truth")
    ax.plot(est[:, 0], est[:, 2], "r--", label="estimate (aligned)")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()
    fig.savefig(path, format="svg")
    plt.close(fig)
