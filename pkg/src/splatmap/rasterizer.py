"""Differentiable Gaussian splatting: projection, tiled forward rendering,
a brute-force reference renderer, and the analytic backward pass."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numba
import numpy as np

from . import _kernels
from .errors import StaleSnapshot
from .geometry import (
    ZNEAR,
    CameraIntrinsics,
    CameraPose,
    quat_conjugate,
    quat_point_derivatives,
    quat_to_rotation,
    rotation_derivatives,
)
from .scene import SH_C0, SH_C1, Gaussian, GaussianMap, sh_basis_colors, sigmoid

THREADS_ENV = "SPLATMAP_THREADS"


def set_threads(n=None):
    """Set the worker count for the parallel kernels (env var override)."""
    if n is None:
        n = os.environ.get(THREADS_ENV)
    if n is None:
        return numba.get_num_threads()
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@dataclass(frozen=True)
class RenderSettings:
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    termination: float = 1e-4  # transmittance below which blending stops; 0 disables
    cov_reg: float = 0.3  # px^2 added to the projected covariance
    tile_size: int = 16
    znear: float = ZNEAR

    def verification(self):
        """Same settings with early termination disabled."""
        return RenderSettings(self.alpha_min, self.alpha_max, 0.0, self.cov_reg, self.tile_size, self.znear)


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    index: int


@dataclass
class Projection:
    """Screen-space quantities for the Gaussians that survived culling.

    Every array is indexed by local index; ``index`` maps back to the map.
    """

    index: np.ndarray
    cam: np.ndarray
    mean2d: np.ndarray
    depth: np.ndarray
    J: np.ndarray
    T: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    extent: np.ndarray
    R_pose: np.ndarray

    def __len__(self):
        return len(self.index)


def _empty_projection(R_pose):
    z = np.zeros
    return Projection(
        z(0, dtype=np.int64), z((0, 3)), z((0, 2)), z(0), z((0, 2, 3)), z((0, 2, 3)), z((0, 3, 3)),
        z((0, 2, 2)), z((0, 3)), z(0), z((0, 3)), z((0, 3)), z(0), z((0, 2)), R_pose,
    )


def project_gaussians(gmap: GaussianMap, pose: CameraPose, K: CameraIntrinsics,
                      settings: RenderSettings = DEFAULT_SETTINGS, subset=None) -> Projection:
    R_p = quat_to_rotation(pose.rotation, normalize=False)
    idx = np.arange(len(gmap)) if subset is None else np.unique(np.asarray(subset, dtype=np.int64))
    if len(idx) == 0:
        return _empty_projection(R_p)
    X = gmap.positions[idx]
    Xc = (X - pose.translation) @ R_p
    front = Xc[:, 2] > settings.znear
    idx, X, Xc = idx[front], X[front], Xc[front]
    if len(idx) == 0:
        return _empty_projection(R_p)

    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    mean2d = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / (z * z)
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / (z * z)
    T = J @ R_p.T

    q = gmap.quats[idx]
    qhat = q / np.linalg.norm(q, axis=1, keepdims=True)
    Rg = quat_to_rotation(qhat, normalize=False)
    s = np.exp(gmap.log_scales[idx])
    M = Rg * s[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += settings.cov_reg
    cov2d[:, 1, 1] += settings.cov_reg
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)

    opacity = sigmoid(gmap.opacity_logits[idx])
    diff = X - pose.translation
    dist = np.linalg.norm(diff, axis=1)
    dirs = diff / dist[:, None]
    color = sh_basis_colors(gmap.sh[idx], dirs)

    # exact screen extent of the region where alpha can reach alpha_min
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(opacity > settings.alpha_min,
                      2.0 * np.log(opacity / settings.alpha_min), -1.0)
    live = r2 > 0
    r2 = np.maximum(r2, 0.0) * (1.0 + 1e-9)
    extent = np.stack([np.sqrt(r2 * cov2d[:, 0, 0]), np.sqrt(r2 * cov2d[:, 1, 1])], axis=1) + 1e-9
    on_screen = (
        live
        & (mean2d[:, 0] + extent[:, 0] >= 0)
        & (mean2d[:, 0] - extent[:, 0] <= K.width - 1)
        & (mean2d[:, 1] + extent[:, 1] >= 0)
        & (mean2d[:, 1] - extent[:, 1] <= K.height - 1)
    )
    k = on_screen
    return Projection(
        idx[k], Xc[k], mean2d[k], z[k].copy(), J[k], T[k], cov3d[k], cov2d[k], conic[k],
        opacity[k], color[k], dirs[k], dist[k], extent[k], R_p,
    )


def project_gaussian(g: Gaussian, pose: CameraPose, K: CameraIntrinsics,
                     settings: RenderSettings = DEFAULT_SETTINGS):
    """Project one Gaussian; returns None when it is culled."""
    m = GaussianMap()
    m.append_raw(g.position, g.quat, g.log_scale, g.opacity_logit, g.sh)
    p = project_gaussians(m, pose, K, settings)
    if len(p) == 0:
        return None
    return ProjectedGaussian(p.mean2d[0], p.cov2d[0], float(p.depth[0]), p.color[0], float(p.opacity[0]), 0)


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3), unclamped
    depth: np.ndarray  # (H, W); 0 where nothing contributes
    alpha: np.ndarray  # (H, W) cumulative opacity, 1 - final transmittance
    final_T: np.ndarray
    n_contrib: np.ndarray
    background: np.ndarray
    proj: Projection
    pose: CameraPose
    K: CameraIntrinsics
    settings: RenderSettings
    generation: int
    map_size: int
    point_list: np.ndarray = field(default=None, repr=False)
    ranges: np.ndarray = field(default=None, repr=False)
    last: np.ndarray = field(default=None, repr=False)
    tiles_x: int = 0

    @property
    def coverage(self):
        return self.n_contrib > 0

    def contributors(self, u, v):
        """Blend records (map index, alpha, transmittance before) at one pixel."""
        p = self.proj
        if self.point_list is not None:
            ts = self.settings.tile_size
            tile = (v // ts) * self.tiles_x + (u // ts)
            cand = self.point_list[self.ranges[tile, 0]:self.last[v, u]]
        else:
            cand = _depth_order(p)
        out = []
        T = 1.0
        for g in cand:
            dx, dy = u - p.mean2d[g, 0], v - p.mean2d[g, 1]
            a, b, c = p.conic[g]
            alpha = min(self.settings.alpha_max, p.opacity[g] * np.exp(-0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy))
            if alpha < self.settings.alpha_min:
                continue
            if T * (1.0 - alpha) < self.settings.termination:
                break
            out.append((int(p.index[g]), alpha, T))
            T *= 1.0 - alpha
        return out


def _depth_order(p: Projection):
    return np.lexsort((p.index, p.depth))


def _bin(p: Projection, K: CameraIntrinsics, ts: int):
    tiles_x = (K.width + ts - 1) // ts
    tiles_y = (K.height + ts - 1) // ts
    n_tiles = tiles_x * tiles_y
    if len(p) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((n_tiles, 2), dtype=np.int64), tiles_x
    lo_x = np.clip(np.ceil(p.mean2d[:, 0] - p.extent[:, 0]), 0, K.width - 1).astype(np.int64)
    hi_x = np.clip(np.floor(p.mean2d[:, 0] + p.extent[:, 0]), 0, K.width - 1).astype(np.int64)
    lo_y = np.clip(np.ceil(p.mean2d[:, 1] - p.extent[:, 1]), 0, K.height - 1).astype(np.int64)
    hi_y = np.clip(np.floor(p.mean2d[:, 1] + p.extent[:, 1]), 0, K.height - 1).astype(np.int64)
    tx0, tx1 = lo_x // ts, hi_x // ts + 1
    ty0, ty1 = lo_y // ts, hi_y // ts + 1
    counts = (tx1 - tx0) * (ty1 - ty0)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    total = int(counts.sum())
    tile_ids = np.empty(total, dtype=np.int64)
    gauss_ids = np.empty(total, dtype=np.int64)
    _kernels.fill_pairs(tx0, tx1, ty0, ty1, tiles_x, offsets, tile_ids, gauss_ids)
    order = np.lexsort((gauss_ids, p.depth[gauss_ids], tile_ids))
    tile_ids = tile_ids[order]
    point_list = gauss_ids[order]
    bounds = np.searchsorted(tile_ids, np.arange(n_tiles + 1))
    ranges = np.stack([bounds[:-1], bounds[1:]], axis=1).astype(np.int64)
    return point_list, ranges, tiles_x


def _reject_box(p: Projection):
    # slightly padded so a pixel is only skipped when its alpha is surely below alpha_min
    ext = p.extent * (1.0 + 1e-9) + 1e-9
    return np.ascontiguousarray(ext[:, 0]), np.ascontiguousarray(ext[:, 1])


def _as_bg(background):
    return np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()


def render(gmap: GaussianMap, pose: CameraPose, K: CameraIntrinsics, width=None, height=None,
           background=(0.0, 0.0, 0.0), settings: RenderSettings = DEFAULT_SETTINGS,
           subset=None) -> RenderOutput:
    """Tiled front-to-back splatting of color, depth and cumulative opacity.

    ``subset`` restricts rendering to the given map indices.
    """
    K = _with_size(K, width, height)
    bg = _as_bg(background)
    p = project_gaussians(gmap, pose, K, settings, subset)
    point_list, ranges, tiles_x = _bin(p, K, settings.tile_size)
    H, W = K.height, K.width
    color = np.empty((H, W, 3))
    depth = np.empty((H, W))
    final_T = np.empty((H, W))
    last = np.empty((H, W), dtype=np.int64)
    count = np.empty((H, W), dtype=np.int64)
    conic = np.ascontiguousarray(p.conic)
    _kernels.forward_tiles(
        ranges, point_list, W, H, tiles_x, settings.tile_size,
        np.ascontiguousarray(p.mean2d[:, 0]), np.ascontiguousarray(p.mean2d[:, 1]), *_reject_box(p),
        np.ascontiguousarray(conic[:, 0]), np.ascontiguousarray(conic[:, 1]), np.ascontiguousarray(conic[:, 2]),
        p.opacity, np.ascontiguousarray(p.color), p.depth, bg,
        settings.alpha_min, settings.alpha_max, settings.termination,
        color, depth, final_T, last, count,
    )
    return RenderOutput(
        color, depth, 1.0 - final_T, final_T, count, bg, p, pose, K, settings,
        gmap.generation, len(gmap), point_list, ranges, last, tiles_x,
    )


def render_naive(gmap: GaussianMap, pose: CameraPose, K: CameraIntrinsics, width=None, height=None,
                 background=(0.0, 0.0, 0.0), settings: RenderSettings = DEFAULT_SETTINGS,
                 subset=None) -> RenderOutput:
    """Reference renderer: one global depth sort, every Gaussian evaluated at
    every pixel, no tiling and no early termination."""
    K = _with_size(K, width, height)
    bg = _as_bg(background)
    p = project_gaussians(gmap, pose, K, settings, subset)
    H, W = K.height, K.width
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    T = np.ones((H, W))
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    count = np.zeros((H, W), dtype=np.int64)
    for g in _depth_order(p):
        dx = uu - p.mean2d[g, 0]
        dy = vv - p.mean2d[g, 1]
        a, b, c = p.conic[g]
        alpha = np.minimum(p.opacity[g] * np.exp(-0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy), settings.alpha_max)
        alpha = np.where(alpha < settings.alpha_min, 0.0, alpha)
        w = alpha * T
        color += w[..., None] * p.color[g]
        depth += w * p.depth[g]
        T = T * (1.0 - alpha)
        count += alpha > 0
    color += T[..., None] * bg
    return RenderOutput(color, depth, 1.0 - T, T, count, bg, p, pose, K,
                        RenderSettings(settings.alpha_min, settings.alpha_max, 0.0, settings.cov_reg,
                                       settings.tile_size, settings.znear),
                        gmap.generation, len(gmap))


def _with_size(K, width, height):
    if width is None and height is None:
        return K
    width = K.width if width is None else width
    height = K.height if height is None else height
    if width < 1 or height < 1:
        raise ValueError("image size must be at least 1x1")
    return CameraIntrinsics(K.fx, K.fy, K.cx, K.cy, int(width), int(height))


@dataclass
class BackwardOptions:
    pose_cov_path: bool = False  # propagate the projected-covariance term to the pose
    pose: bool = True  # compute pose gradients at all


@dataclass
class SceneGradients:
    positions: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    pose_t: np.ndarray
    pose_q: np.ndarray
    mean2d: np.ndarray = field(default=None, repr=False)  # (N, 2) screen-space, for densification

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, 4, 3)), np.zeros(3), np.zeros(4), np.zeros((n, 2)))

    def __getitem__(self, name):
        return getattr(self, name)

    def __iadd__(self, other):
        for name in ("positions", "quats", "log_scales", "opacity_logits", "sh", "pose_t", "pose_q", "mean2d"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self


def backward(out: RenderOutput, grad_color, grad_depth, gmap: GaussianMap, pose: CameraPose = None,
             K: CameraIntrinsics = None, options: BackwardOptions = None) -> SceneGradients:
    """Analytic gradients of a loss given its derivatives w.r.t. the rendered
    color and depth images."""
    if options is None:
        options = BackwardOptions()
    if out.point_list is None:
        raise ValueError("backward needs the output of the tiled renderer")
    if gmap.generation != out.generation or len(gmap) != out.map_size:
        raise StaleSnapshot("map changed since render")
    if pose is not None and not (
        np.array_equal(pose.rotation, out.pose.rotation) and np.array_equal(pose.translation, out.pose.translation)
    ):
        raise StaleSnapshot("pose differs from the rendered pose")
    grads = SceneGradients.zeros(len(gmap))
    if len(out.proj) == 0:
        return grads
    acc = screen_gradients(out, grad_color, grad_depth)
    _project_backward(acc, out.proj, gmap, out.pose, out.K, options, grads)
    return grads


# columns of the screen-space gradient table
SCREEN_COLUMNS = ("mean_x", "mean_y", "conic_a", "conic_b", "conic_c", "opacity", "r", "g", "b", "depth")


def screen_gradients(out: RenderOutput, grad_color, grad_depth):
    """Per projected Gaussian derivatives of the loss with respect to its
    screen-space quantities (see ``SCREEN_COLUMNS``), before the chain rule
    through projection. Row order follows ``out.proj``."""
    K, p, st = out.K, out.proj, out.settings
    H, W = K.height, K.width
    gc = np.ascontiguousarray(np.broadcast_to(np.asarray(grad_color, dtype=np.float64), (H, W, 3)))
    gd = np.ascontiguousarray(np.broadcast_to(np.asarray(grad_depth, dtype=np.float64), (H, W)))
    entry = np.zeros((len(out.point_list), _kernels.N_GRAD))
    conic = np.ascontiguousarray(p.conic)
    _kernels.backward_tiles(
        out.ranges, out.point_list, W, H, out.tiles_x, st.tile_size,
        np.ascontiguousarray(p.mean2d[:, 0]), np.ascontiguousarray(p.mean2d[:, 1]), *_reject_box(p),
        np.ascontiguousarray(conic[:, 0]), np.ascontiguousarray(conic[:, 1]), np.ascontiguousarray(conic[:, 2]),
        p.opacity, np.ascontiguousarray(p.color), p.depth, out.background,
        st.alpha_min, st.alpha_max, out.final_T, out.last, gc, gd, entry,
    )
    return _kernels.reduce_entries(out.point_list, entry, len(p))


def _project_backward(acc, p: Projection, gmap, pose, K, options, grads):
    idx = p.index
    dm = acc[:, 0:2]
    GA = np.empty((len(p), 2, 2))
    GA[:, 0, 0] = acc[:, 2]
    GA[:, 0, 1] = GA[:, 1, 0] = acc[:, 3]
    GA[:, 1, 1] = acc[:, 4]
    dop = acc[:, 5]
    dcol = acc[:, 6:9]
    ddep = acc[:, 9]
    R_p = p.R_pose
    grads.mean2d[idx] = dm

    # conic -> projected covariance -> (T, Σ)
    A = np.empty((len(p), 2, 2))
    A[:, 0, 0] = p.conic[:, 0]
    A[:, 0, 1] = A[:, 1, 0] = p.conic[:, 1]
    A[:, 1, 1] = p.conic[:, 2]
    Gs = -A @ GA @ A
    dT = 2.0 * Gs @ p.T @ p.cov3d
    dSigma = np.swapaxes(p.T, 1, 2) @ Gs @ p.T
    dJ = dT @ R_p
    dW = np.swapaxes(p.J, 1, 2) @ dT

    x, y, z = p.cam[:, 0], p.cam[:, 1], p.cam[:, 2]
    dXc_md = np.einsum("nij,ni->nj", p.J, dm)
    dXc_md[:, 2] += ddep
    dXc_J = np.zeros_like(dXc_md)
    z2, z3 = z * z, z * z * z
    dXc_J[:, 0] = -K.fx / z2 * dJ[:, 0, 2]
    dXc_J[:, 1] = -K.fy / z2 * dJ[:, 1, 2]
    dXc_J[:, 2] = (-K.fx / z2 * dJ[:, 0, 0] + 2 * K.fx * x / z3 * dJ[:, 0, 2]
                   - K.fy / z2 * dJ[:, 1, 1] + 2 * K.fy * y / z3 * dJ[:, 1, 2])
    dXc = dXc_md + dXc_J
    dX = dXc @ R_p.T

    # view-direction dependence of the SH color
    sh = gmap.sh[idx]
    dirs = p.dirs
    ddir = np.stack([
        -SH_C1 * np.sum(sh[:, 3] * dcol, axis=1),
        -SH_C1 * np.sum(sh[:, 1] * dcol, axis=1),
        SH_C1 * np.sum(sh[:, 2] * dcol, axis=1),
    ], axis=1)
    dX += (ddir - dirs * np.sum(dirs * ddir, axis=1, keepdims=True)) / p.dist[:, None]
    grads.positions[idx] = dX

    dsh = np.empty((len(p), 4, 3))
    dsh[:, 0] = SH_C0 * dcol
    dsh[:, 1] = -SH_C1 * dirs[:, 1:2] * dcol
    dsh[:, 2] = SH_C1 * dirs[:, 2:3] * dcol
    dsh[:, 3] = -SH_C1 * dirs[:, 0:1] * dcol
    grads.sh[idx] = dsh

    o = p.opacity
    grads.opacity_logits[idx] = dop * o * (1.0 - o)

    q = gmap.quats[idx]
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    qhat = q / qn
    Rg = quat_to_rotation(qhat, normalize=False)
    s = np.exp(gmap.log_scales[idx])
    M = Rg * s[:, None, :]
    dM = 2.0 * dSigma @ M
    ds = np.sum(dM * Rg, axis=1)
    grads.log_scales[idx] = ds * s
    dRg = dM * s[:, None, :]
    dqhat = np.einsum("nkab,nab->nk", rotation_derivatives(qhat), dRg)
    grads.quats[idx] = (dqhat - qhat * np.sum(qhat * dqhat, axis=1, keepdims=True)) / qn

    if not options.pose:
        return
    dXc_pose = dXc_md + dXc_J if options.pose_cov_path else dXc_md
    grads.pose_t = -(dXc_pose.sum(axis=0) @ R_p.T)
    qc = quat_conjugate(pose.rotation)
    Y = gmap.positions[idx] - pose.translation
    D = quat_point_derivatives(qc, Y)  # (M, 4, 3), w.r.t. conjugate components
    dq = np.einsum("nkj,nj->k", D, dXc_pose) * np.array([1.0, -1.0, -1.0, -1.0])
    if options.pose_cov_path:
        dR = np.swapaxes(dW.sum(axis=0), 0, 1)
        dq = dq + np.einsum("kab,ab->k", rotation_derivatives(pose.rotation), dR)
    grads.pose_q = dq
