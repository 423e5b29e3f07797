"""Map lifecycle: initialization from the first frame, adaptive expansion
(add / delete), densification and per-keyframe optimization."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import Diverged, EmptyDepth
from .geometry import CameraIntrinsics, CameraPose, backproject, camera_to_world, quat_to_rotation
from .optim import MapAdam, exp_lr
from .rasterizer import DEFAULT_SETTINGS, BackwardOptions, RenderSettings, SceneGradients, backward, render
from .scene import GaussianMap, mean_neighbor_spacing

log = logging.getLogger(__name__)


@dataclass
class MapperConfig:
    tau_T: float = 0.5  # cumulative-opacity threshold for unreliable pixels
    tau_D: float = 0.05  # depth-error threshold, meters
    eta: float = 0.1  # opacity factor applied to floaters
    gamma: float = 0.10  # floater margin in front of the surface, meters
    enable_delete: bool = True
    iterations: int = 100
    init_iterations: int = 0  # iterations on the first keyframe; 0 = iterations
    densify_interval: int = 10  # 0 disables densification
    densify_until: int = 70
    split_scale: float = 0.02
    grad_threshold: float = 0.002
    prune_opacity: float = 0.005
    w_color: float = 0.8
    w_depth: float = 0.3
    lr_position_init: float = 1.6e-5
    lr_position_final: float = 1.7e-7
    lr_position_steps: int = 100
    lr_sh: float = 5e-4
    lr_opacity: float = 1e-2
    lr_scale: float = 2e-4
    lr_rotation: float = 4e-5
    lr_multiplier: float = 1.0  # common factor on every map learning rate
    opacity_init: float = 0.5
    seed_scale_factor: float = 1.0  # multiplies the neighbor-spacing seed scale
    seed_stride: int = 2
    window: int = 10

    def __post_init__(self):
        for name in ("tau_T", "tau_D", "eta", "gamma", "split_scale", "grad_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_multiplier <= 0:
            raise ValueError("lr_multiplier must be positive")
        if self.iterations < 0 or self.init_iterations < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.w_color < 0 or self.w_depth < 0:
            raise ValueError("loss weights must be non-negative")

    def learning_rates(self, step):
        m = self.lr_multiplier
        return {
            "positions": m * exp_lr(step, self.lr_position_init, self.lr_position_final, self.lr_position_steps),
            "quats": m * self.lr_rotation,
            "log_scales": m * self.lr_scale,
            "opacity_logits": m * self.lr_opacity,
            "sh": m * self.lr_sh,
        }


@dataclass
class View:
    """An observed RGB-D image with its (estimated) camera pose."""

    pose: CameraPose
    color: np.ndarray
    depth: np.ndarray


def valid_depth(depth):
    d = np.asarray(depth, dtype=np.float64)
    return np.isfinite(d) & (d > 0)


def checkerboard(h, w, stride=2):
    """Sampling mask keeping one pixel in ``stride`` (a checkerboard for 2)."""
    vv, uu = np.mgrid[0:h, 0:w]
    return ((uu + vv) % stride) == 0


def _seed(gmap: GaussianMap, frame_color, frame_depth, mask, pose, K, cfg: MapperConfig):
    v, u = np.nonzero(mask)
    if len(u) == 0:
        return 0
    z = frame_depth[v, u]
    world = camera_to_world(pose, backproject(K, u, v, z))
    # spacing-based scale, capped near the sampling footprint of isolated seeds
    footprint = cfg.seed_stride * z / K.fx
    if len(world) > 1:
        scale = np.minimum(mean_neighbor_spacing(world), 2.0 * footprint)
    else:
        scale = footprint
    gmap.add_gaussians(world, frame_color[v, u], cfg.opacity_init, cfg.seed_scale_factor * scale)
    return len(u)


def initialize_map(gmap: GaussianMap, frame, pose: CameraPose, K: CameraIntrinsics, cfg: MapperConfig = None):
    """Seed the map from every other pixel (with valid depth) of the first frame."""
    cfg = cfg or MapperConfig()
    if len(gmap):
        raise ValueError("initialize_map expects an empty map")
    valid = valid_depth(frame.depth)
    if not valid.any():
        raise EmptyDepth("first frame has no valid depth")
    h, w = valid.shape
    mask = valid & checkerboard(h, w, cfg.seed_stride)
    return _seed(gmap, frame.color, np.nan_to_num(frame.depth), mask, pose, K, cfg)


def unreliable_mask(gmap, frame, pose, K, cfg: MapperConfig = None, background=(0, 0, 0),
                    settings: RenderSettings = DEFAULT_SETTINGS):
    """Pixels whose cumulative opacity is low or whose rendered depth disagrees
    with the observation."""
    cfg = cfg or MapperConfig()
    out = render(gmap, pose, K, background=background, settings=settings)
    valid = valid_depth(frame.depth)
    d = np.nan_to_num(frame.depth)
    return (out.alpha < cfg.tau_T) | (valid & (np.abs(d - out.depth) > cfg.tau_D))


def expansion_add(gmap, frame, pose, K, cfg: MapperConfig = None, background=(0, 0, 0),
                  settings: RenderSettings = DEFAULT_SETTINGS):
    """Back-project (a stride-subsampled set of) unreliable pixels as new Gaussians."""
    cfg = cfg or MapperConfig()
    bad = unreliable_mask(gmap, frame, pose, K, cfg, background, settings)
    h, w = bad.shape
    mask = bad & valid_depth(frame.depth) & checkerboard(h, w, cfg.seed_stride)
    return _seed(gmap, frame.color, np.nan_to_num(frame.depth), mask, pose, K, cfg)


def expansion_delete(gmap, frame, pose, K, cfg: MapperConfig = None):
    """Degenerate the opacity of visible Gaussians floating in front of the
    observed surface."""
    cfg = cfg or MapperConfig()
    if not cfg.enable_delete or len(gmap) == 0:
        return 0
    Xc = (gmap.positions - pose.translation) @ pose.R
    z = Xc[:, 2]
    front = z > DEFAULT_SETTINGS.znear
    zs = np.where(front, z, 1.0)
    u = np.round(K.fx * Xc[:, 0] / zs + K.cx).astype(np.int64)
    v = np.round(K.fy * Xc[:, 1] / zs + K.cy).astype(np.int64)
    inside = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    idx = np.nonzero(inside)[0]
    D = np.asarray(frame.depth, dtype=np.float64)[v[idx], u[idx]]
    ok = np.isfinite(D) & (D > 0)
    floaters = idx[ok & (D - z[idx] > cfg.gamma)]
    for i in floaters:
        gmap.scale_opacity(int(i), cfg.eta)
    return len(floaters)


class DensifyStats:
    def __init__(self, n):
        self.grad_norm = np.zeros(n)
        self.count = np.zeros(n)
        self.pos_grad = np.zeros((n, 3))

    def add(self, out, grads, norm):
        """Accumulate screen-space gradient norms (NDC units, per-pixel-mean loss)."""
        idx = out.proj.index
        W, H = out.K.width, out.K.height
        g = grads.mean2d[idx] * np.array([W / 2.0, H / 2.0]) / norm
        self.grad_norm[idx] += np.linalg.norm(g, axis=1)
        self.count[idx] += 1
        self.pos_grad[idx] += grads.positions[idx]


def densify(gmap: GaussianMap, stats: DensifyStats, cfg: MapperConfig = None):
    """Split large / clone small high-gradient Gaussians, then prune nearly
    transparent ones. Returns (split count, clone count)."""
    cfg = cfg or MapperConfig()
    n = len(gmap)
    mean = np.where(stats.count > 0, stats.grad_norm / np.maximum(stats.count, 1), 0.0)
    cand = mean > cfg.grad_threshold
    scales = gmap.scales
    big = scales.max(axis=1) > cfg.split_scale if n else np.zeros(0, bool)
    split = cand & big
    clone = cand & ~big
    if clone.any():
        idx = np.nonzero(clone)[0]
        g = stats.pos_grad[idx]
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(gn > 0, -g / np.maximum(gn, 1e-300), 0.0)
        pos = gmap.positions[idx] + direction * scales[idx].max(axis=1, keepdims=True)
        gmap.append_raw(pos, gmap.quats[idx], gmap.log_scales[idx], gmap.opacity_logits[idx], gmap.sh[idx])
    if split.any():
        idx = np.nonzero(split)[0]
        q = gmap.quats[idx]
        R = quat_to_rotation(q / np.linalg.norm(q, axis=1, keepdims=True), normalize=False)
        major = np.argmax(scales[idx], axis=1)
        axis = R[np.arange(len(idx)), :, major]
        offset = 0.5 * scales[idx, major][:, None] * axis
        for sign in (1.0, -1.0):
            gmap.append_raw(gmap.positions[idx] + sign * offset, gmap.quats[idx],
                            gmap.log_scales[idx] + np.log(0.6), gmap.opacity_logits[idx], gmap.sh[idx])
    keep = np.ones(len(gmap), dtype=bool)
    keep[:n][split] = False
    keep &= gmap.opacities >= cfg.prune_opacity
    if not keep.all():
        gmap.keep(keep)
    return int(split.sum()), int(clone.sum())


def photometric_geometric_loss(out, color, depth, w_color, w_depth):
    """Weighted L1 color + masked L1 depth; returns (loss, dL/dC, dL/dD)."""
    dc = out.color - color
    d_obs = np.asarray(depth, dtype=np.float64)
    mask = valid_depth(d_obs) & out.coverage
    dd = np.where(mask, out.depth - np.nan_to_num(d_obs), 0.0)
    loss = w_color * np.abs(dc).sum() + w_depth * np.abs(dd).sum()
    return float(loss), w_color * np.sign(dc), w_depth * np.sign(dd)


def run_optimization(gmap, views, K, cfg: MapperConfig, iterations, background=(0, 0, 0),
                     w_color=None, w_depth=None, densify_enabled=True, optimize_sh_rest=False,
                     pose_hook=None, settings: RenderSettings = DEFAULT_SETTINGS):
    """Shared Adam loop for mapping and bundle adjustment.

    ``pose_hook(it, view_index, grads)`` may update view poses; it is given
    the per-view SceneGradients after each backward pass. Returns the list of
    losses, one per evaluation (the last entry is at the final parameters).
    """
    w_color = cfg.w_color if w_color is None else w_color
    w_depth = cfg.w_depth if w_depth is None else w_depth
    opt = MapAdam(gmap)
    stats = DensifyStats(len(gmap))
    losses = []
    want_pose = pose_hook is not None
    for it in range(iterations + 1):
        total = 0.0
        acc = None
        outs = []
        for vi, view in enumerate(views):
            out = render(gmap, view.pose, K, background=background, settings=settings)
            loss, gc, gd = photometric_geometric_loss(out, view.color, view.depth, w_color, w_depth)
            total += loss
            if it == iterations:
                continue
            g = backward(out, gc, gd, gmap, options=BackwardOptions(pose_cov_path=want_pose, pose=want_pose))
            outs.append((vi, out, g))
            if acc is None:
                acc = SceneGradients.zeros(len(gmap))
            acc += g
        losses.append(total)
        if not np.isfinite(total):
            raise Diverged("mapping loss became non-finite")
        if it == iterations or acc is None:
            break
        if densify_enabled:
            norm = K.width * K.height
            for _, out, g in outs:
                stats.add(out, g, norm)
        lrs = cfg.learning_rates(it)
        frozen = None if optimize_sh_rest else gmap.sh[:, 1:].copy()
        opt.step(acc, lrs)
        if frozen is not None:
            gmap.sh[:, 1:] = frozen
        if want_pose:
            for vi, _, g in outs:
                pose_hook(it, vi, g)
        if (densify_enabled and cfg.densify_interval > 0 and (it + 1) % cfg.densify_interval == 0
                and it + 1 <= cfg.densify_until):
            s, c = densify(gmap, stats, cfg)
            if s or c:
                log.debug("densify at %d: split %d clone %d -> %d gaussians", it + 1, s, c, len(gmap))
            stats = DensifyStats(len(gmap))
    return losses


def optimize_map(gmap, window, K, cfg: MapperConfig = None, iterations=None, background=(0, 0, 0),
                 densify_enabled=True, settings: RenderSettings = DEFAULT_SETTINGS):
    """Minimize the weighted color + depth L1 loss over a keyframe window.

    ``window`` holds objects with ``pose``, ``color`` and ``depth``. Returns
    the summed loss at the final parameters.
    """
    cfg = cfg or MapperConfig()
    iterations = cfg.iterations if iterations is None else iterations
    if not window:
        raise ValueError("keyframe window is empty")
    losses = run_optimization(gmap, list(window), K, cfg, iterations, background,
                              densify_enabled=densify_enabled, settings=settings)
    return losses[-1]
