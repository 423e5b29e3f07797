"""Finite-difference check of the analytic backward pass on small random scenes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, quat_normalize
from .rasterizer import DEFAULT_SETTINGS, BackwardOptions, backward, render
from .scene import GaussianMap

# gradient classes, in report order: (label, map attribute or pose field)
CLASSES = (
    ("position", "positions"),
    ("quaternion", "quats"),
    ("log_scale", "log_scales"),
    ("opacity_logit", "opacity_logits"),
    ("sh_band0", "sh"),
    ("pose_t", "pose_t"),
    ("pose_q", "pose_q"),
)
RTOL = 1e-3
ATOL = 1e-8
STEP = 1e-6


@dataclass
class GradcheckReport:
    trials: int
    rtol: float = RTOL
    atol: float = ATOL
    max_rel: dict = field(default_factory=dict)  # class -> worst relative error
    failures: dict = field(default_factory=dict)  # class -> count of entries out of tolerance

    @property
    def passed(self):
        return not any(self.failures.values())

    def table(self):
        lines = [f"{'class':<14} {'max rel err':>12} {'failures':>9}  status"]
        for name, _ in CLASSES:
            if name not in self.max_rel:
                continue
            bad = self.failures.get(name, 0)
            lines.append(f"{name:<14} {self.max_rel[name]:>12.3e} {bad:>9d}  {'FAIL' if bad else 'ok'}")
        lines.append(f"trials={self.trials} rtol={self.rtol:g} atol={self.atol:g}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def random_fixture(rng, n_max=20, size=32, view_dependent=False):
    """A few random Gaussians in front of a slightly rotated camera.

    Band-1 SH stays zero unless ``view_dependent``: the pose gradient treats
    color as view independent, so only then would it differ from the
    finite differences.
    """
    n = int(rng.integers(1, n_max + 1))
    gmap = GaussianMap()
    pos = rng.uniform([-0.5, -0.5, 1.5], [0.5, 0.5, 3.0], (n, 3))
    q = rng.normal(size=(n, 4))
    log_s = np.log(rng.uniform(0.05, 0.2, (n, 3)))
    logits = rng.uniform(-2.0, 2.0, n)
    sh = np.zeros((n, 4, 3))
    sh[:, 0] = rng.normal(size=(n, 3))
    if view_dependent:
        sh[:, 1:] = 0.3 * rng.normal(size=(n, 3, 3))
    gmap.append_raw(pos, q, log_s, logits, sh)
    pose = CameraPose(quat_normalize(rng.normal(size=4) * 0.05 + [1, 0, 0, 0]), rng.normal(size=3) * 0.05)
    K = CameraIntrinsics(size * 0.95, size * 0.95, (size - 1) / 2.0, (size - 1) / 2.0, size, size)
    wc = rng.normal(size=(size, size, 3))
    wd = rng.normal(size=(size, size))
    return gmap, pose, K, wc, wd


def _loss(gmap, pose, K, wc, wd, settings):
    out = render(gmap, pose, K, settings=settings)
    return float(np.sum(out.color * wc) + np.sum(out.depth * wd))


def _difference(f, base, step, tries=3):
    """Central difference of ``f`` at 0. Where the one-sided differences
    disagree the step straddles a culling threshold (alpha cutoff or
    screen extent), so the step is shrunk tenfold and retried."""
    for _ in range(tries):
        lp, lm = f(step), f(-step)
        fwd, bwd = (lp - base) / step, (base - lm) / step
        if abs(fwd - bwd) <= 1e-2 * max(abs(fwd), abs(bwd)) + 1e-4:
            break
        step *= 0.1
    return (lp - lm) / (2 * step)


def _entries(name, arr):
    if name == "sh_band0":
        return [(i, 0, c) for i in range(arr.shape[0]) for c in range(3)]
    return [np.unravel_index(i, arr.shape) for i in range(arr.size)]


def check_fixture(gmap, pose, K, wc, wd, report: GradcheckReport, corrupt=None, step=STEP):
    """Compare every analytic entry against central differences and update ``report``."""
    settings = DEFAULT_SETTINGS.verification()
    out = render(gmap, pose, K, settings=settings)
    grads = backward(out, wc, wd, gmap, options=BackwardOptions(pose_cov_path=True, pose=True))
    base = float(np.sum(out.color * wc) + np.sum(out.depth * wd))
    if corrupt is not None:
        corrupt(grads)

    def record(name, analytic, numeric):
        diff = abs(analytic - numeric)
        rel = diff / max(abs(analytic), abs(numeric)) if diff > 0 else 0.0
        report.max_rel[name] = max(report.max_rel.get(name, 0.0), rel)
        if diff > max(report.rtol * max(abs(analytic), abs(numeric)), report.atol):
            report.failures[name] = report.failures.get(name, 0) + 1

    for name, attr in CLASSES[:5]:
        arr = getattr(gmap, attr)
        an = getattr(grads, attr)
        for ix in _entries(name, arr):
            old = arr[ix]

            def f(h):
                arr[ix] = old + h
                gmap.touch()
                try:
                    return _loss(gmap, pose, K, wc, wd, settings)
                finally:
                    arr[ix] = old
                    gmap.touch()

            record(name, float(an[ix]), _difference(f, base, step))

    for name, analytic in (("pose_t", grads.pose_t), ("pose_q", grads.pose_q)):
        vec = pose.translation if name == "pose_t" else pose.rotation
        for i in range(len(vec)):
            def f(h):
                v = vec.copy()
                v[i] += h
                p = CameraPose(pose.rotation, v) if name == "pose_t" else CameraPose(v, pose.translation)
                return _loss(gmap, p, K, wc, wd, settings)

            record(name, float(analytic[i]), _difference(f, base, step))


def run_gradcheck(seed=0, trials=50, corrupt=None, n_max=20, size=32, rtol=RTOL, atol=ATOL):
    """Run ``trials`` seeded fixtures; ``corrupt(grads)`` may tamper with the
    analytic gradients (a negative control)."""
    report = GradcheckReport(trials, rtol, atol)
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        check_fixture(*random_fixture(rng, n_max, size), report, corrupt)
    return report


def corruption(name, factor=1.01):
    """A ``corrupt`` hook scaling one gradient class by ``factor``."""
    attr = dict(CLASSES)[name]

    def hook(grads):
        setattr(grads, attr, getattr(grads, attr) * factor)

    return hook
