"""Adam updates for map parameters (moments stored on the map) and poses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose, quat_normalize

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, arr):
        return cls(np.zeros_like(arr), np.zeros_like(arr))


def adam_update(param, grad, m, v, step, lr):
    """In-place Adam step; ``step`` is the 1-based count after this update."""
    m *= BETA1
    m += (1.0 - BETA1) * grad
    v *= BETA2
    v += (1.0 - BETA2) * grad * grad
    if lr == 0.0:
        return
    mhat = m / (1.0 - BETA1 ** step)
    vhat = v / (1.0 - BETA2 ** step)
    param -= lr * mhat / (np.sqrt(vhat) + EPS)


def exp_lr(step, lr_init, lr_final, max_steps):
    """Log-linear decay from ``lr_init`` to ``lr_final`` over ``max_steps``."""
    if lr_init == 0.0:
        return 0.0
    t = min(max(step / max_steps, 0.0), 1.0)
    return float(np.exp(np.log(lr_init) * (1 - t) + np.log(lr_final) * t))


class MapAdam:
    """Adam over the map's parameter arrays. Moments live in ``gmap.moments``
    so they follow densification and pruning."""

    def __init__(self, gmap):
        self.gmap = gmap
        self.step_count = 0

    def step(self, grads, lrs):
        gmap = self.gmap
        self.step_count += 1
        touched = False
        for name, lr in lrs.items():
            g = grads[name]
            p = getattr(gmap, name)
            if name not in gmap.moments or gmap.moments[name][0].shape != p.shape:
                gmap.moments[name] = (np.zeros_like(p), np.zeros_like(p))
            m, v = gmap.moments[name]
            adam_update(p, g, m, v, self.step_count, lr)
            touched |= lr != 0.0
        if touched:
            gmap.touch()


@dataclass
class PoseAdam:
    """Adam on raw (translation, quaternion) with renormalization after each step."""

    lr_t: float
    lr_q: float
    t_state: AdamState = field(default_factory=lambda: AdamState.like(np.zeros(3)))
    q_state: AdamState = field(default_factory=lambda: AdamState.like(np.zeros(4)))
    step_count: int = 0

    def step(self, pose: CameraPose, grad_t, grad_q, scale=1.0) -> CameraPose:
        """One update; ``scale`` multiplies both learning rates for this step."""
        self.step_count += 1
        t = pose.translation.copy()
        q = pose.rotation.copy()
        lr_t, lr_q = self.lr_t * scale, self.lr_q * scale
        adam_update(t, np.asarray(grad_t, dtype=np.float64), self.t_state.m, self.t_state.v, self.step_count, lr_t)
        adam_update(q, np.asarray(grad_q, dtype=np.float64), self.q_state.m, self.q_state.v, self.step_count, lr_q)
        if lr_q == 0.0:
            return CameraPose(pose.rotation, t)
        return CameraPose(quat_normalize(q), t)
