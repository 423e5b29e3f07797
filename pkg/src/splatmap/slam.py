"""The SLAM loop: track every frame, expand and optimize the map on
keyframes, and periodically bundle-adjust a keyframe window."""
from __future__ import annotations

import csv
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets, evaluation
from .bundle_adjustment import KeyframeDB, bundle_adjust
from .config import RunConfig
from .datasets import Trajectory
from .geometry import CameraPose, constant_velocity_predict
from .mapper import expansion_add, expansion_delete, initialize_map, optimize_map
from .rasterizer import render, render_naive
from .scene import GaussianMap, save_checkpoint
from .tracker import TrackResult, keyframe_decision, track

log = logging.getLogger(__name__)

LOG_FIELDS = ["frame", "iterations", "coarse_loss", "fine_loss", "reliable_fraction", "keyframe",
              "tx", "ty", "tz", "qx", "qy", "qz", "qw"]


@dataclass
class SlamState:
    gmap: GaussianMap = field(default_factory=GaussianMap)
    keyframes: KeyframeDB = field(default_factory=KeyframeDB)
    trajectory: Trajectory = field(default_factory=Trajectory)
    frame_count: int = 0
    ba_count: int = 0
    last_keyframe: int = 0
    log_rows: list = field(default_factory=list)


class SlamSystem:
    """Incremental SLAM over a frame stream with fixed intrinsics."""

    def __init__(self, K, cfg: RunConfig, first_pose: CameraPose = None):
        self.K = K
        self.cfg = cfg
        self.bg = np.asarray(cfg.background, dtype=np.float64)
        self.state = SlamState()
        self.first_pose = first_pose or CameraPose.identity()
        self.rng = np.random.default_rng([cfg.run.seed, 11])
        self.lock = threading.Lock()
        self.on_keyframe = None  # optional callback(kf) for previews

    # -- mapping side --------------------------------------------------------

    def _map_keyframe(self, kf, first=False):
        cfg, st = self.cfg, self.state
        t0 = time.perf_counter()
        if first:
            initialize_map(st.gmap, kf, kf.pose, self.K, cfg.mapper)
        else:
            added = expansion_add(st.gmap, kf, kf.pose, self.K, cfg.mapper, self.bg)
            removed = expansion_delete(st.gmap, kf, kf.pose, self.K, cfg.mapper)
            log.debug("keyframe %d: +%d gaussians, %d degenerated", kf.index, added, removed)
        window = st.keyframes.window(cfg.mapper.window, self.rng)
        iterations = cfg.mapper.init_iterations if first and cfg.mapper.init_iterations else cfg.mapper.iterations
        if iterations > 0:
            optimize_map(st.gmap, window, self.K, cfg.mapper, iterations, background=self.bg)
        n_kf = len(st.keyframes)
        if cfg.ba.every > 0 and n_kf % cfg.ba.every == 0 and cfg.ba.iterations > 0:
            bundle_adjust(st.gmap, st.keyframes, self.K, cfg.ba, cfg.mapper, rng=self.rng, background=self.bg)
            st.ba_count += 1
            for rec in st.keyframes:
                st.trajectory.poses[rec.index] = rec.pose
        log.info("keyframe %d mapped: %d gaussians, %.2f s", kf.index, len(st.gmap), time.perf_counter() - t0)
        if self.on_keyframe is not None:
            self.on_keyframe(kf)

    # -- tracking side -------------------------------------------------------

    def _predict(self):
        poses = self.state.trajectory.poses
        if len(poses) == 1:
            return poses[-1]
        return constant_velocity_predict(poses[-1], poses[-2])

    def _track(self, frame, gmap):
        cfg = self.cfg.tracker
        P_init = self._predict()
        if cfg.iterations == 0 or len(gmap) == 0:
            return TrackResult(P_init, float("nan"), 0.0 if len(gmap) == 0 else 1.0)
        return track(gmap, frame, P_init, self.K, cfg, background=self.bg)

    def _record(self, index, result: TrackResult, iterations):
        p = result.pose
        t, q = p.translation, p.rotation
        self.state.log_rows.append([index, iterations, f"{result.coarse_loss:.9g}", f"{result.loss:.9g}",
                                    f"{result.reliable_fraction:.6f}", int(result.is_keyframe),
                                    *(f"{v:.9f}" for v in t), *(f"{v:.9f}" for v in (q[1], q[2], q[3], q[0]))])

    def process(self, index, frame):
        """Handle one frame in sequential mode; returns its TrackResult."""
        st = self.state
        if index == 0:
            pose = self.first_pose.normalized()
            st.trajectory.append(frame.timestamp, pose)
            kf = st.keyframes.add(0, pose, frame.color, frame.depth)
            self._map_keyframe(kf, first=True)
            result = TrackResult(pose, float("nan"), 1.0, True, float("nan"), 0)
        else:
            result = self._track(frame, st.gmap)
            result.is_keyframe = keyframe_decision(index, st.last_keyframe, result.reliable_fraction, self.cfg.tracker)
            st.trajectory.append(frame.timestamp, result.pose)
            if result.is_keyframe:
                st.last_keyframe = index
                kf = st.keyframes.add(index, result.pose, frame.color, frame.depth)
                self._map_keyframe(kf)
        st.frame_count += 1
        self._record(index, result, 0 if index == 0 else self.cfg.tracker.iterations)
        return result

    def run_sequential(self, frames):
        for i, frame in enumerate(frames):
            try:
                self.process(i, frame)
            except Exception:
                log.error("failed while processing frame %d", i)
                raise

    def run_parallel(self, frames):
        """Tracking on this thread against map snapshots; mapping on a worker
        fed through a bounded keyframe queue."""
        st = self.state
        jobs = queue.Queue(maxsize=2)
        failure = []

        def mapper():
            while True:
                item = jobs.get()
                if item is None:
                    return
                kf, first = item
                try:
                    with self.lock:
                        self._map_keyframe(kf, first)
                except Exception as exc:  # surfaced on the tracking thread
                    failure.append(exc)
                    return

        worker = threading.Thread(target=mapper, name="splatmap-mapper", daemon=True)
        worker.start()
        try:
            for i, frame in enumerate(frames):
                if failure:
                    raise failure[0]
                if i == 0:
                    pose = self.first_pose.normalized()
                    st.trajectory.append(frame.timestamp, pose)
                    kf = st.keyframes.add(0, pose, frame.color, frame.depth)
                    jobs.put((kf, True))
                    result = TrackResult(pose, float("nan"), 1.0, True, float("nan"), 0)
                else:
                    with self.lock:
                        snapshot = st.gmap.copy()
                    result = self._track(frame, snapshot)
                    result.is_keyframe = keyframe_decision(i, st.last_keyframe, result.reliable_fraction,
                                                           self.cfg.tracker)
                    st.trajectory.append(frame.timestamp, result.pose)
                    if result.is_keyframe:
                        st.last_keyframe = i
                        with self.lock:
                            kf = st.keyframes.add(i, result.pose, frame.color, frame.depth)
                        jobs.put((kf, False))
                st.frame_count += 1
                self._record(i, result, 0 if i == 0 else self.cfg.tracker.iterations)
        finally:
            jobs.put(None)
            worker.join()
        if failure:
            raise failure[0]


def load_frames(cfg: RunConfig):
    """Returns (frames, intrinsics, ground-truth trajectory or None, synthetic scene or None)."""
    if cfg.run.dataset == "tum":
        frames, gt, K = datasets.load_tum_sequence(cfg.run.tum_path)
        return frames, K, gt if gt is not None and len(gt) else None, None
    scene, frames = datasets.generate_synthetic(cfg.run.seed, cfg.synthetic)
    return frames, scene.K, scene.trajectory, scene


def _first_pose(frames, gt):
    if gt is None or not len(frames):
        return CameraPose.identity()
    pairs = evaluation.associate([frames.timestamps[0]], gt.timestamps, datasets.TUM_MAX_DT)
    return gt.poses[pairs[0][1]] if pairs else CameraPose.identity()


def novel_view_metrics(gmap, scene, background, count=10):
    """Compare renders of the estimated map with oracle renders of the
    ground-truth map at poses halfway between training frames."""
    spec = scene.spec
    n = spec.frames
    if n < 2:
        return None
    ks = np.linspace(0, n - 1, count + 2)[1:-1]
    ks = np.floor(ks) + 0.5
    psnrs, ssims, depths = [], [], []
    for k in ks:
        pose = datasets.synthetic_pose(spec, k, scene.pivot)
        ref = render_naive(scene.gmap, pose, scene.K, background=background)
        est = render(gmap, pose, scene.K, background=background)
        psnrs.append(evaluation.psnr(np.clip(est.color, 0, 1), np.clip(ref.color, 0, 1)))
        ssims.append(evaluation.ssim(np.clip(est.color, 0, 1), np.clip(ref.color, 0, 1)))
        depths.append(evaluation.depth_l1(est.depth, ref.depth))
    return float(np.mean(psnrs)), float(np.mean(ssims)), float(np.mean(depths))


def run(cfg: RunConfig, out_dir=None):
    """Run a full sequence, write artifacts and return (EvalReport, SlamState)."""
    cfg.validate()
    out = Path(out_dir or cfg.run.output)
    frames, K, gt, scene = load_frames(cfg)
    if cfg.run.max_frames > 0:
        frames = frames.head(cfg.run.max_frames)
    out.mkdir(parents=True, exist_ok=True)
    system = SlamSystem(K, cfg, _first_pose(frames, gt))
    if cfg.run.previews:
        (out / "previews").mkdir(exist_ok=True)

        def preview(kf):
            r = render(system.state.gmap, kf.pose, K, background=system.bg)
            datasets.save_color_png(out / "previews" / f"kf_{kf.index:05d}.png", r.color)

        system.on_keyframe = preview
    start = time.perf_counter()
    if cfg.run.mode == "parallel":
        system.run_parallel(frames)
    else:
        system.run_sequential(frames)
    elapsed = time.perf_counter() - start
    st = system.state

    datasets.write_trajectory(out / "trajectory.txt", st.trajectory)
    save_checkpoint(st.gmap, out / "map.ckpt")
    with open(out / "tracking_log.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_FIELDS)
        w.writerows(st.log_rows)

    report = evaluation.EvalReport(frame_count=st.frame_count,
                                   fps=st.frame_count / elapsed if elapsed > 0 else None)
    report.extra = {"gaussians": len(st.gmap), "keyframes": len(st.keyframes), "bundle_adjustments": st.ba_count}
    aligned = gt_pos = None
    if gt is not None and len(st.trajectory) >= 3:
        rmse, errs, aligned, gt_pos = evaluation.ate(st.trajectory, gt)
        report.ate_rmse = rmse
        report.translation_errors = [float(e) for e in errs]
    if scene is not None:
        nv = novel_view_metrics(st.gmap, scene, system.bg)
        if nv is not None:
            report.psnr, report.ssim, report.depth_l1 = nv
    evaluation.write_report(report, out, aligned, gt_pos, st.trajectory.timestamps)
    return report, st
