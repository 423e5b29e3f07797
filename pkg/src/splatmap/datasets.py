"""RGB-D input: TUM-format sequences, synthetic ground-truth scenes, and
trajectory / image file I/O."""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MalformedLine, MissingIndexFile, NoAssociations
from .evaluation import associate
from .geometry import CameraIntrinsics, CameraPose, quat_from_axis_angle, quat_multiply, quat_normalize
from .scene import SH_C0, GaussianMap, logit

TUM_DEPTH_SCALE = 5000.0
TUM_MAX_DT = 0.02

# ROS default calibration used when a sequence does not match a known camera
TUM_INTRINSICS = {
    "freiburg1": (517.3, 516.5, 318.6, 255.3),
    "freiburg2": (520.9, 521.0, 325.1, 249.7),
    "freiburg3": (535.4, 539.2, 320.1, 247.6),
    "default": (525.0, 525.0, 319.5, 239.5),
}


@dataclass
class Frame:
    timestamp: float
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid


@dataclass
class Trajectory:
    timestamps: list = field(default_factory=list)
    poses: list = field(default_factory=list)

    def __len__(self):
        return len(self.poses)

    def append(self, timestamp, pose):
        if self.timestamps and timestamp < self.timestamps[-1]:
            raise ValueError("trajectory timestamps must be non-decreasing")
        self.timestamps.append(float(timestamp))
        self.poses.append(pose)

    def __iter__(self):
        return iter(zip(self.timestamps, self.poses))

    def positions(self):
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


# --- trajectory text format -------------------------------------------------

def write_trajectory(path, traj: Trajectory):
    """TUM format: ``timestamp tx ty tz qx qy qz qw`` per line."""
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, pose in traj:
        r, i, j, k = pose.rotation
        tx, ty, tz = pose.translation
        lines.append(" ".join(repr(float(v)) for v in (ts, tx, ty, tz, i, j, k, r)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    traj = Trajectory()
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.replace(",", " ").split()
            if len(parts) != 8:
                raise MalformedLine(path, line_no, f"expected 8 fields, got {len(parts)}")
            try:
                ts, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            except ValueError as e:
                raise MalformedLine(path, line_no, str(e)) from None
            try:
                traj.append(ts, CameraPose([qw, qx, qy, qz], [tx, ty, tz]))
            except ValueError as e:
                raise MalformedLine(path, line_no, str(e)) from None
    return traj


# --- images -----------------------------------------------------------------

def save_color_png(path, color):
    img = np.clip(np.asarray(color, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def save_depth_png(path, depth, scale=1000.0):
    """16-bit PNG; default scale stores millimeters."""
    d = np.asarray(depth, dtype=np.float64)
    d = np.where(np.isfinite(d) & (d > 0), d, 0.0)
    raw = np.clip(np.round(d * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def load_color_png(path):
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def load_depth_png(path, scale=TUM_DEPTH_SCALE):
    raw = np.asarray(Image.open(path)).astype(np.float64)
    return raw / scale


def save_count_pgm(path, counts):
    """Binary PGM heatmap of per-pixel contributor counts."""
    c = np.asarray(counts)
    top = max(int(c.max()), 1) if c.size else 1
    img = np.round(c.astype(np.float64) / top * 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


# --- TUM sequences ----------------------------------------------------------

def _read_index(path):
    entries = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 2:
                raise MalformedLine(path, line_no, "expected 'timestamp path'")
            try:
                entries.append((float(parts[0]), parts[1]))
            except ValueError as e:
                raise MalformedLine(path, line_no, str(e)) from None
    return entries


class FrameStream:
    """Sequence of RGB-D frames loaded on demand.

    Iteration prefetches the next frame on a worker thread (queue depth 2).
    """

    def __init__(self, loaders, timestamps):
        self._loaders = list(loaders)
        self.timestamps = list(timestamps)

    @classmethod
    def from_frames(cls, frames):
        frames = list(frames)
        return cls([(lambda fr=fr: fr) for fr in frames], [fr.timestamp for fr in frames])

    def __len__(self):
        return len(self._loaders)

    def head(self, n):
        return FrameStream(self._loaders[:n], self.timestamps[:n])

    def __getitem__(self, i) -> Frame:
        return self._loaders[i]()

    def __iter__(self):
        q: queue.Queue = queue.Queue(maxsize=2)
        stop = threading.Event()

        def work():
            try:
                for load in self._loaders:
                    if stop.is_set():
                        return
                    q.put(("ok", load()))
                q.put(("end", None))
            except Exception as e:  # surfaced in the consumer thread
                q.put(("err", e))

        t = threading.Thread(target=work, daemon=True)
        t.start()
        try:
            while True:
                kind, item = q.get()
                if kind == "end":
                    return
                if kind == "err":
                    raise item
                yield item
        finally:
            stop.set()
            while t.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    t.join(0.01)


def tum_intrinsics(directory, width=640, height=480):
    name = Path(directory).name
    for key, vals in TUM_INTRINSICS.items():
        if key in name:
            break
    else:
        vals = TUM_INTRINSICS["default"]
    return CameraIntrinsics(*vals, width, height)


def load_tum_sequence(directory):
    """Returns (FrameStream, ground-truth Trajectory, CameraIntrinsics)."""
    d = Path(directory)
    for name in ("rgb.txt", "depth.txt"):
        if not (d / name).is_file():
            raise MissingIndexFile(f"{d / name} not found")
    rgb = _read_index(d / "rgb.txt")
    depth = _read_index(d / "depth.txt")
    pairs = associate([t for t, _ in rgb], [t for t, _ in depth], TUM_MAX_DT)
    if not pairs:
        raise NoAssociations(f"{d}: no rgb/depth pair within {TUM_MAX_DT} s")

    def loader(rgb_entry, depth_entry):
        def load():
            return Frame(rgb_entry[0], load_color_png(d / rgb_entry[1]), load_depth_png(d / depth_entry[1]))
        return load

    stream = FrameStream([loader(rgb[a], depth[b]) for a, b in pairs], [rgb[a][0] for a, _ in pairs])
    gt = read_trajectory(d / "groundtruth.txt") if (d / "groundtruth.txt").is_file() else Trajectory()
    first = Image.open(d / rgb[pairs[0][0]][1])
    K = tum_intrinsics(d, *first.size)
    return stream, gt, K


# --- synthetic scenes ---------------------------------------------------------

@dataclass
class SyntheticSpec:
    gaussians: int = 200
    extent: float = 1.0  # scales the whole layout; 1.0 puts the back wall at 1.5 m
    trajectory: str = "orbit"  # orbit | line
    frames: int = 100
    width: int = 96
    height: int = 72
    focal: float = 80.0
    step: float = 0.002  # per-frame motion: radians (orbit) or meters (line)
    color_noise: float = 0.0
    depth_noise: float = 0.0
    background: tuple = (0.0, 0.0, 0.0)
    object_fraction: float = 0.3
    # layout, in units of ``extent``
    wall_depth: float = 1.5
    wall_half_width: float = 2.2
    wall_half_height: float = 1.5
    object_depth: tuple = (0.9, 1.2)
    object_kind: str = "blob"  # blob | panel
    object_size: tuple = (0.03, 0.08)  # blob scales, or panel half sizes
    panels: int = 3
    color_variation: float = 0.2  # per-Gaussian color jitter on walls and panels
    object_opacity: tuple = (0.85, 0.97)
    wall_relief: float = 0.0  # amplitude of a smooth depth undulation on the wall
    relief_period: float = 1.5


@dataclass
class SyntheticScene:
    gmap: GaussianMap
    trajectory: Trajectory
    K: CameraIntrinsics
    background: np.ndarray
    spec: SyntheticSpec
    pivot: np.ndarray


def _rot_y(angle):
    return quat_from_axis_angle([0.0, 1.0, 0.0], angle)


def synthetic_pose(spec: SyntheticSpec, k, pivot=None):
    """Pose number ``k`` (may be fractional) of the synthetic trajectory."""
    if spec.trajectory == "orbit":
        if pivot is None:
            pivot = np.array([0.0, 0.0, 1.2 * spec.extent])
        theta = (k - 0.5 * (spec.frames - 1)) * spec.step
        q = _rot_y(theta)
        R = CameraPose(q).R
        return CameraPose(q, pivot - R @ pivot)
    if spec.trajectory == "line":
        x = (k - 0.5 * (spec.frames - 1)) * spec.step
        return CameraPose([1.0, 0.0, 0.0, 0.0], [x, 0.0, 0.0])
    raise ValueError(f"unknown trajectory kind {spec.trajectory!r}")


def _smooth_colors(rng, pts, extent, variation=0.2):
    """Low-frequency color field plus per-Gaussian variation."""
    freq = rng.uniform(1.0, 3.0, (3, 3)) / extent
    phase = rng.uniform(0, 2 * np.pi, 3)
    base = 0.5 + 0.3 * np.sin(pts @ freq + phase)
    return np.clip(base + rng.uniform(-variation, variation, base.shape), 0.05, 0.95)


def _disc_grid(rng, n, center, half_w, half_h, e, base_color=None, opacity=0.97, depth_jitter=0.02,
               variation=0.2):
    """Jittered grid of ``n`` flat discs covering a fronto-parallel rectangle."""
    aspect = half_w / half_h
    rows = max(1, int(round(np.sqrt(n / aspect))))
    cols = max(1, int(np.ceil(n / rows)))
    cells = [(r, c) for r in range(rows) for c in range(cols)][:n]
    sx, sy = 2 * half_w / cols, 2 * half_h / rows
    pos = np.array([[-half_w + (c + 0.5) * sx, -half_h + (r + 0.5) * sy, 0.0] for r, c in cells]).reshape(-1, 3)
    pos[:, :2] += rng.uniform(-0.25, 0.25, (len(pos), 2)) * [sx, sy]
    pos[:, 2] += rng.uniform(-depth_jitter, depth_jitter, len(pos)) * e
    pos += center
    angles = rng.uniform(-np.pi, np.pi, len(pos))
    quats = np.array([quat_from_axis_angle([0, 0, 1], a) for a in angles]).reshape(-1, 4)
    scales = np.stack([
        0.75 * sx * rng.uniform(0.9, 1.3, len(pos)),
        0.75 * sy * rng.uniform(0.9, 1.3, len(pos)),
        np.full(len(pos), 0.01 * e),
    ], axis=1)
    cols_rgb = _smooth_colors(rng, pos, e, variation)
    if base_color is not None:
        cols_rgb = np.clip(0.5 * cols_rgb + 0.5 * base_color, 0.05, 0.95)
    sh = np.zeros((len(pos), 4, 3))
    sh[:, 0] = (cols_rgb - 0.5) / SH_C0
    return pos, quats, np.log(scales), logit(np.full(len(pos), opacity)), sh


def build_synthetic_map(rng, spec: SyntheticSpec) -> GaussianMap:
    e = spec.extent
    n = spec.gaussians
    n_obj = int(round(spec.object_fraction * n)) if n > 1 else 0
    n_wall = n - n_obj
    gmap = GaussianMap()

    # back wall, wide enough for the whole trajectory
    wall = list(_disc_grid(rng, n_wall, [0.0, 0.0, spec.wall_depth * e],
                           spec.wall_half_width * e, spec.wall_half_height * e, e,
                           variation=spec.color_variation))
    if spec.wall_relief:
        # continuous depth variation gives parallax without depth edges
        k = 2 * np.pi / (spec.relief_period * e)
        x, y = wall[0][:, 0], wall[0][:, 1]
        wall[0] = wall[0].copy()
        wall[0][:, 2] -= spec.wall_relief * e * np.cos(k * x) * np.cos(k * y)
    gmap.append_raw(*wall)
    if not n_obj:
        return gmap
    z0, z1 = spec.object_depth
    # keep objects inside the view cone at their depth
    spread = np.array([0.6, 0.4]) * z0 * e
    if spec.object_kind == "panel":
        # opaque cards made of small discs: sharp depth edges
        k = max(1, min(spec.panels, n_obj))
        counts = np.full(k, n_obj // k)
        counts[: n_obj % k] += 1
        for count in counts:
            center = rng.uniform([-spread[0], -spread[1], z0 * e], [spread[0], spread[1], z1 * e])
            hw, hh = rng.uniform(*spec.object_size, 2) * e
            gmap.append_raw(*_disc_grid(rng, int(count), center, hw, hh, e, rng.uniform(0.1, 0.9, 3),
                                        rng.uniform(*spec.object_opacity), depth_jitter=0.005,
                                        variation=spec.color_variation))
        return gmap
    if spec.object_kind != "blob":
        raise ValueError(f"unknown object kind {spec.object_kind!r}")
    # compact blobs floating in front of the wall
    centers = rng.uniform([-spread[0], -spread[1], z0 * e], [spread[0], spread[1], z1 * e], (n_obj, 3))
    q = quat_normalize(rng.normal(size=(n_obj, 4)))
    s = rng.uniform(*spec.object_size, (n_obj, 3)) * e
    c = rng.uniform(0.1, 0.9, (n_obj, 3))
    sh = np.zeros((n_obj, 4, 3))
    sh[:, 0] = (c - 0.5) / SH_C0
    gmap.append_raw(centers, q, np.log(s), logit(rng.uniform(*spec.object_opacity, n_obj)), sh)
    return gmap


def generate_synthetic(seed, spec: SyntheticSpec | None = None):
    """Deterministic ground-truth scene and its rendered frame stream."""
    from .rasterizer import render_naive

    spec = spec or SyntheticSpec()
    if spec.gaussians < 1 or spec.frames < 1:
        raise ValueError("gaussian and frame counts must be >= 1")
    rng = np.random.default_rng(seed)
    gmap = build_synthetic_map(rng, spec)
    K = CameraIntrinsics(spec.focal, spec.focal, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0,
                         spec.width, spec.height)
    pivot = np.array([0.0, 0.0, 1.2 * spec.extent])
    bg = np.asarray(spec.background, dtype=np.float64)
    traj = Trajectory()
    frames = []
    noise_rng = np.random.default_rng([seed, 1])
    for k in range(spec.frames):
        pose = synthetic_pose(spec, k, pivot)
        ts = k / 30.0
        traj.append(ts, pose)
        out = render_naive(gmap, pose, K, background=bg)
        color, depth = out.color, out.depth
        if spec.color_noise > 0:
            color = color + noise_rng.normal(0, spec.color_noise, color.shape)
        if spec.depth_noise > 0:
            depth = np.where(depth > 0, depth + noise_rng.normal(0, spec.depth_noise, depth.shape), 0.0)
        frames.append(Frame(ts, color, depth))
    scene = SyntheticScene(gmap, traj, K, bg, spec, pivot)
    return scene, FrameStream.from_frames(frames)
