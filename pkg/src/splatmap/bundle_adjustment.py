"""Joint refinement of a random window of keyframe poses and the map."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose
from .mapper import MapperConfig, run_optimization
from .optim import PoseAdam
from .rasterizer import DEFAULT_SETTINGS


@dataclass
class Keyframe:
    index: int
    pose: CameraPose
    color: np.ndarray
    depth: np.ndarray


@dataclass
class KeyframeDB:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i) -> Keyframe:
        return self.records[i]

    def add(self, index, pose, color, depth):
        if self.records and index <= self.records[-1].index:
            raise ValueError(f"keyframe index {index} not after {self.records[-1].index}")
        kf = Keyframe(int(index), pose.normalized(), color, depth)
        self.records.append(kf)
        return kf

    def window(self, size, rng):
        """The newest keyframe plus up to ``size - 1`` random earlier ones, in index order."""
        n = len(self.records)
        if n == 0:
            return []
        others = rng.choice(n - 1, size=min(size - 1, n - 1), replace=False) if n > 1 else []
        return [self.records[i] for i in sorted([*map(int, others), n - 1])]

    def sample(self, size, rng):
        """``size`` random keyframes (all of them if fewer), in index order."""
        n = len(self.records)
        take = rng.choice(n, size=min(size, n), replace=False)
        return [self.records[i] for i in sorted(map(int, take))]


@dataclass
class BAConfig:
    window: int = 10
    iterations: int = 100
    color_weight: float = 0.8 / 0.3  # relative to the depth term
    lr_t: float = 2e-4
    lr_q: float = 5e-4
    every: int = 10  # run after every this many keyframes; 0 disables
    seed: int = 0


def bundle_adjust(gmap, db: KeyframeDB, K, cfg: BAConfig = None, map_cfg: MapperConfig = None,
                  rng=None, background=(0, 0, 0), settings=DEFAULT_SETTINGS):
    """Refine the map over a random keyframe window, then map and poses jointly.

    The first half of the iterations updates only the map. The earliest
    sampled keyframe anchors the gauge and keeps its pose. No densification
    happens here, so the Gaussian count is unchanged. Returns the loss
    history (one entry per evaluation).
    """
    cfg = cfg or BAConfig()
    map_cfg = map_cfg or MapperConfig()
    if len(db) == 0:
        raise ValueError("keyframe database is empty")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    chosen = db.sample(cfg.window, rng)
    if cfg.iterations <= 0:
        return []
    k = len(chosen)
    optimizers = {i: PoseAdam(cfg.lr_t, cfg.lr_q) for i in range(1, k)}
    half = cfg.iterations // 2

    def pose_hook(it, vi, grads):
        if it < half or vi == 0:
            return
        kf = chosen[vi]
        kf.pose = optimizers[vi].step(kf.pose, grads.pose_t, grads.pose_q)

    # the (1/K) average is folded into both weights
    return run_optimization(
        gmap, chosen, K, map_cfg, cfg.iterations, background,
        w_color=cfg.color_weight / k, w_depth=1.0 / k, densify_enabled=False,
        optimize_sh_rest=True, pose_hook=pose_hook, settings=settings,
    )
