"""Small deterministic scenes shared by the module tests."""
import numpy as np

from splatmap.datasets import Frame
from splatmap.geometry import CameraIntrinsics, CameraPose
from splatmap.rasterizer import render_naive
from splatmap.scene import SH_C0, GaussianMap, logit


def intrinsics(w=32, h=24, f=30.0):
    return CameraIntrinsics(f, f, (w - 1) / 2.0, (h - 1) / 2.0, w, h)


def plane_frame(K, depth=2.0, color=(0.6, 0.4, 0.2), valid=None):
    d = np.full((K.height, K.width), depth)
    if valid is not None:
        d = np.where(valid, d, 0.0)
    c = np.broadcast_to(np.asarray(color, float), (K.height, K.width, 3)).copy()
    return Frame(0.0, c, d)


def patch_map(rng, n=64, depth=2.0, half=1.4, opacity=0.95):
    """A jittered grid of flat Gaussians covering a square facing the camera."""
    side = int(np.ceil(np.sqrt(n)))
    g = (np.arange(side) + 0.5) / side * 2 * half - half
    xx, yy = np.meshgrid(g, g)
    pos = np.stack([xx.ravel(), yy.ravel(), np.full(side * side, depth)], 1)[:n]
    pos[:, :2] += rng.uniform(-0.02, 0.02, (n, 2))
    spacing = 2 * half / side
    log_s = np.log(np.tile([0.7 * spacing, 0.7 * spacing, 0.01], (n, 1)))
    sh = np.zeros((n, 4, 3))
    sh[:, 0] = (rng.uniform(0.2, 0.8, (n, 3)) - 0.5) / SH_C0
    gmap = GaussianMap()
    gmap.append_raw(pos, np.tile([1.0, 0, 0, 0], (n, 1)), log_s, np.full(n, logit(opacity)), sh)
    return gmap


def frame_of(gmap, pose, K, background=(0, 0, 0)):
    out = render_naive(gmap, pose, K, background=background)
    return Frame(0.0, out.color, out.depth)


def identity():
    return CameraPose.identity()


def pose_error(a, b):
    """(translation distance, rotation angle in radians) between two poses."""
    return a.translation_distance_to(b), a.rotation_angle_to(b)


def perturbed(rng, pose, degrees, meters):
    """``pose`` rotated by ``degrees`` about a random axis and shifted by ``meters`` in a random direction."""
    from splatmap.geometry import quat_from_axis_angle, quat_multiply

    axis = rng.normal(size=3)
    shift = rng.normal(size=3)
    q = quat_multiply(quat_from_axis_angle(axis / np.linalg.norm(axis), np.deg2rad(degrees)), pose.rotation)
    return CameraPose(q, pose.translation + meters * shift / np.linalg.norm(shift))
