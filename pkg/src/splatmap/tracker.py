"""Per-frame pose estimation by gradient descent through the renderer,
coarse (half resolution, whole map) then fine (full resolution, reliable
Gaussians only)."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .errors import Diverged
from .geometry import CameraIntrinsics, CameraPose
from .optim import PoseAdam
from .rasterizer import DEFAULT_SETTINGS, BackwardOptions, RenderSettings, backward, render

log = logging.getLogger(__name__)

MODES = ("coarse_to_fine", "fine", "coarse")


@dataclass
class TrackerConfig:
    coarse_iterations: int = 5
    iterations: int = 10  # total, coarse included
    epsilon: float = 0.05  # reliable-depth margin, meters
    lr_t: float = 2e-4
    lr_q: float = 5e-4
    lr_decay: float = 1.0  # learning-rate factor reached at the last iteration (1 = constant)
    w_color: float = 0.8
    outlier_factor: float = 10.0  # <= 0 disables outlier masking
    outlier_in_coarse: bool = True
    keyframe_interval: int = 30
    reliable_fraction: float = 0.85
    mode: str = "coarse_to_fine"
    pose_cov_path: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown tracking mode {self.mode!r}")
        if self.iterations < 0 or self.coarse_iterations < 0:
            raise ValueError("iteration counts must be non-negative")
        # zero total iterations disables tracking (pose = prediction)
        if self.mode == "coarse_to_fine" and self.iterations and self.coarse_iterations >= self.iterations:
            raise ValueError("coarse iterations must be below the total iteration count")
        if self.keyframe_interval < 1:
            raise ValueError("keyframe interval must be >= 1")


@dataclass
class TrackResult:
    pose: CameraPose
    loss: float
    reliable_fraction: float
    is_keyframe: bool = False
    coarse_loss: float = float("nan")
    iterations: int = 0


def _visible(gmap, pose: CameraPose, K: CameraIntrinsics, znear=DEFAULT_SETTINGS.znear):
    """Indices, pixel coordinates and depths of Gaussians whose centers project
    inside the image."""
    if len(gmap) == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e, e, np.zeros(0)
    Xc = (gmap.positions - pose.translation) @ pose.R
    z = Xc[:, 2]
    front = z > znear
    zs = np.where(front, z, 1.0)
    u = np.round(K.fx * Xc[:, 0] / zs + K.cx).astype(np.int64)
    v = np.round(K.fy * Xc[:, 1] / zs + K.cy).astype(np.int64)
    inside = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    idx = np.nonzero(inside)[0]
    return idx, u[idx], v[idx], z[idx]


def select_reliable(gmap, pose: CameraPose, depth, K: CameraIntrinsics, epsilon):
    """Visible Gaussians whose camera depth agrees with the observed depth at
    their projected pixel within ``epsilon``. Returns (selected, visible) index arrays."""
    idx, u, v, z = _visible(gmap, pose, K)
    D = np.asarray(depth, dtype=np.float64)[v, u]
    ok = np.isfinite(D) & (D > 0) & (np.abs(D - z) <= epsilon)
    return idx[ok], idx


def color_loss(out, color, w_color=1.0, outlier_factor=0.0):
    """Masked per-pixel L1 color loss.

    Pixels without contributors are ignored, as are pixels whose loss exceeds
    ``outlier_factor`` times the median (when positive). Returns
    (summed loss, mean loss over kept pixels, dL/dC, kept mask).
    """
    diff = out.color - color
    per_pixel = np.abs(diff).sum(axis=2)
    keep = out.coverage.copy()
    if outlier_factor > 0 and keep.any():
        med = np.median(per_pixel[keep])
        keep &= per_pixel <= outlier_factor * med
    total = w_color * float(per_pixel[keep].sum())
    mean = total / max(int(keep.sum()), 1)
    grad = w_color * np.sign(diff) * keep[..., None]
    return total, mean, grad, keep


def evaluation_loss(gmap, pose, frame, K, background=(0, 0, 0), settings=DEFAULT_SETTINGS):
    """Mean full-resolution color loss of the whole map, used to compare stages."""
    out = render(gmap, pose, K, background=background, settings=settings)
    return color_loss(out, frame.color)[1]


def track(gmap, frame, P_init: CameraPose, K: CameraIntrinsics, cfg: TrackerConfig = None,
          background=(0, 0, 0), settings: RenderSettings = DEFAULT_SETTINGS) -> TrackResult:
    """Estimate the camera pose of ``frame`` starting from ``P_init``.

    The map is only read. The coarse stage renders at half resolution with
    halved intrinsics (and a quartered screen-space regularizer) against the
    even-pixel subsample of the frame.
    """
    cfg = cfg or TrackerConfig()
    if cfg.mode == "coarse_to_fine":
        n_coarse = min(cfg.coarse_iterations, cfg.iterations)
    elif cfg.mode == "coarse":
        n_coarse = cfg.iterations
    else:
        n_coarse = 0
    n_fine = cfg.iterations - n_coarse
    options = BackwardOptions(pose_cov_path=cfg.pose_cov_path, pose=True)
    opt = PoseAdam(cfg.lr_t, cfg.lr_q)
    pose = P_init.normalized()
    color = np.asarray(frame.color, dtype=np.float64)

    n_total = max(cfg.iterations - 1, 1)
    counter = [0]

    def step(pose, K_s, target, subset, outlier, rs):
        scale = cfg.lr_decay ** (counter[0] / n_total)
        counter[0] += 1
        out = render(gmap, pose, K_s, background=background, settings=rs, subset=subset)
        total, _, grad, keep = color_loss(out, target, cfg.w_color, outlier)
        if not np.isfinite(total):
            raise Diverged("tracking loss became non-finite")
        if not keep.any():
            return pose, total
        g = backward(out, grad, np.zeros(target.shape[:2]), gmap, options=options)
        return opt.step(pose, g.pose_t, g.pose_q, scale), total

    if n_coarse:
        K_half = K.scaled(0.5)
        target = color[::2, ::2]
        # a quarter of the screen-space regularizer keeps it fixed in full-resolution
        # pixels, so the coarse render equals the even-pixel subsample of the full one
        coarse = dataclasses.replace(settings, cov_reg=0.25 * settings.cov_reg)
        outlier = cfg.outlier_factor if cfg.outlier_in_coarse else 0.0
        for _ in range(n_coarse):
            pose, _ = step(pose, K_half, target, None, outlier, coarse)
    coarse_loss = evaluation_loss(gmap, pose, frame, K, background, settings)

    selected, visible = select_reliable(gmap, pose, frame.depth, K, cfg.epsilon)
    fraction = len(selected) / len(visible) if len(visible) else 0.0
    if n_fine and len(selected):
        for _ in range(n_fine):
            pose, _ = step(pose, K, color, selected, cfg.outlier_factor, settings)
    final_loss = evaluation_loss(gmap, pose, frame, K, background, settings) if n_fine else coarse_loss
    if not np.isfinite(final_loss):
        raise Diverged("tracking loss became non-finite")
    return TrackResult(pose, final_loss, fraction, False, coarse_loss, cfg.iterations)


def keyframe_decision(frame_index, last_keyframe, reliable_fraction, cfg: TrackerConfig = None):
    cfg = cfg or TrackerConfig()
    return (frame_index - last_keyframe) >= cfg.keyframe_interval or reliable_fraction < cfg.reliable_fraction
