"""Gaussian map storage, parameterization and checkpoint I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadCheckpoint, InvalidIndex
from .geometry import quat_to_rotation

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

PARAM_NAMES = ("positions", "quats", "log_scales", "opacity_logits", "sh")

CHECKPOINT_MAGIC = b"SPLATMAP"
CHECKPOINT_VERSION = 1
_RECORD = np.dtype(
    [
        ("position", "<f8", (3,)),
        ("quat", "<f8", (4,)),
        ("log_scale", "<f8", (3,)),
        ("opacity_logit", "<f8"),
        ("sh", "<f8", (12,)),
    ]
)

_OPACITY_EPS = 1e-6


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sh_basis_colors(sh, view_dirs):
    """Degree-1 SH evaluation. ``sh`` is (N, 4, 3), ``view_dirs`` (N, 3) unit.

    Returns unclamped RGB (N, 3) including the +0.5 offset.
    """
    sh = np.asarray(sh, dtype=np.float64)
    d = np.asarray(view_dirs, dtype=np.float64)
    x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
    return (
        SH_C0 * sh[:, 0]
        + SH_C1 * (-y * sh[:, 1] + z * sh[:, 2] - x * sh[:, 3])
        + 0.5
    )


def covariance_from(quats, log_scales):
    """Σ = R S Sᵀ Rᵀ for a batch of (quaternion, log-scale) pairs."""
    q = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    R = quat_to_rotation(q / np.linalg.norm(q, axis=-1, keepdims=True), normalize=False)
    s = np.exp(np.asarray(log_scales, dtype=np.float64).reshape(-1, 3))
    M = R * s[:, None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class Gaussian:
    """A single map primitive in its stored (unconstrained) parameterization."""

    position: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray  # (4, 3): band-0 then the three band-1 coefficients, per channel

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self):
        return np.exp(self.log_scale)


def covariance(g: Gaussian):
    return covariance_from(g.quat, g.log_scale)[0]


def sh_color(g: Gaussian, view_dir):
    return sh_basis_colors(np.asarray(g.sh)[None], np.asarray(view_dir, dtype=np.float64)[None])[0]


def mean_neighbor_spacing(positions, k=3):
    """Per-point RMS distance to the ``k`` nearest other points."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if n == 0:
        return np.zeros(0)
    if n == 1:
        return np.full(1, 0.01)
    k = min(k, n - 1)
    dist, _ = cKDTree(positions).query(positions, k=k + 1)
    d = dist[:, 1:]
    return np.maximum(np.sqrt(np.mean(d * d, axis=1)), 1e-7)


class GaussianMap:
    """Growable structure-of-arrays container of Gaussians.

    Per-parameter optimizer moments live in ``self.moments`` keyed by
    parameter name, and are resized together with the parameters. Every
    mutation bumps ``generation`` so cached renders can detect staleness.
    """

    def __init__(self):
        self.positions = np.zeros((0, 3))
        self.quats = np.zeros((0, 4))
        self.log_scales = np.zeros((0, 3))
        self.opacity_logits = np.zeros(0)
        self.sh = np.zeros((0, 4, 3))
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.generation = 0

    def __len__(self):
        return len(self.positions)

    @property
    def count(self):
        return len(self)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def touch(self):
        self.generation += 1

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        other = GaussianMap()
        for name in PARAM_NAMES:
            setattr(other, name, getattr(self, name).copy())
        other.moments = {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()}
        other.generation = self.generation
        return other

    def __getitem__(self, index) -> Gaussian:
        self._check_index(index)
        return Gaussian(
            self.positions[index].copy(),
            self.quats[index].copy(),
            self.log_scales[index].copy(),
            float(self.opacity_logits[index]),
            self.sh[index].copy(),
        )

    def _check_index(self, index):
        if not isinstance(index, (int, np.integer)) or not 0 <= index < len(self):
            raise InvalidIndex(f"gaussian index {index} out of range for map of {len(self)}")

    def append_raw(self, positions, quats, log_scales, opacity_logits, sh):
        """Append Gaussians given directly in stored parameterization."""
        start = len(self)
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        self.positions = np.concatenate([self.positions, positions])
        self.quats = np.concatenate([self.quats, np.asarray(quats, dtype=np.float64).reshape(n, 4)])
        self.log_scales = np.concatenate(
            [self.log_scales, np.asarray(log_scales, dtype=np.float64).reshape(n, 3)]
        )
        self.opacity_logits = np.concatenate(
            [self.opacity_logits, np.asarray(opacity_logits, dtype=np.float64).reshape(n)]
        )
        self.sh = np.concatenate([self.sh, np.asarray(sh, dtype=np.float64).reshape(n, 4, 3)])
        for name, (m, v) in self.moments.items():
            shape = (n,) + m.shape[1:]
            self.moments[name] = (np.concatenate([m, np.zeros(shape)]), np.concatenate([v, np.zeros(shape)]))
        self.touch()
        return range(start, start + n)

    def add_gaussians(self, positions, colors, opacity_init=0.5, scale_init=None):
        """Seed new isotropic Gaussians whose view-independent color equals
        ``colors``. ``scale_init`` defaults to the local neighbor spacing of
        the seed positions."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        if n == 0:
            return range(len(self), len(self))
        colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
        if scale_init is None:
            scale_init = mean_neighbor_spacing(positions)
        scale = np.broadcast_to(np.asarray(scale_init, dtype=np.float64), (n,))
        opacity = np.broadcast_to(np.asarray(opacity_init, dtype=np.float64), (n,))
        sh = np.zeros((n, 4, 3))
        sh[:, 0] = (colors - 0.5) / SH_C0
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        log_scales = np.repeat(np.log(scale)[:, None], 3, axis=1)
        return self.append_raw(positions, quats, log_scales, logit(opacity), sh)

    def scale_opacity(self, index, factor):
        self._check_index(index)
        if not factor > 0:
            raise ValueError("opacity factor must be positive")
        o = sigmoid(self.opacity_logits[index]) * factor
        o = min(max(o, _OPACITY_EPS), 1.0 - _OPACITY_EPS)
        self.opacity_logits[index] = logit(o)
        self.touch()

    def keep(self, mask):
        """Compact the map to the Gaussians where ``mask`` is true."""
        mask = np.asarray(mask, dtype=bool)
        for name in PARAM_NAMES:
            setattr(self, name, getattr(self, name)[mask])
        self.moments = {k: (m[mask], v[mask]) for k, (m, v) in self.moments.items()}
        self.touch()
        return int((~mask).sum())

    def remove_gaussians(self, predicate):
        """Remove every Gaussian for which ``predicate(gaussian)`` is true.

        ``predicate`` may also be a boolean array over the map.
        """
        if callable(predicate):
            drop = np.array([bool(predicate(self[i])) for i in range(len(self))], dtype=bool)
        else:
            drop = np.asarray(predicate, dtype=bool)
        if not drop.any():
            return 0
        return self.keep(~drop)

    def checksum(self):
        import hashlib

        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()


def save_checkpoint(gmap: GaussianMap, path):
    n = len(gmap)
    rec = np.zeros(n, dtype=_RECORD)
    rec["position"] = gmap.positions
    rec["quat"] = gmap.quats
    rec["log_scale"] = gmap.log_scales
    rec["opacity_logit"] = gmap.opacity_logits
    rec["sh"] = gmap.sh.reshape(n, 12)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, n))
        f.write(rec.tobytes())


def load_checkpoint(path) -> GaussianMap:
    data = Path(path).read_bytes()
    header = len(CHECKPOINT_MAGIC) + 12
    if len(data) < header or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadCheckpoint(f"{path}: not a map checkpoint")
    version, n = struct.unpack("<IQ", data[len(CHECKPOINT_MAGIC):header])
    if version != CHECKPOINT_VERSION:
        raise BadCheckpoint(f"{path}: unsupported version {version}")
    if len(data) != header + n * _RECORD.itemsize:
        raise BadCheckpoint(f"{path}: expected {n} records, size mismatch")
    rec = np.frombuffer(data, dtype=_RECORD, count=n, offset=header)
    gmap = GaussianMap()
    gmap.append_raw(rec["position"], rec["quat"], rec["log_scale"], rec["opacity_logit"], rec["sh"].reshape(n, 4, 3))
    return gmap
