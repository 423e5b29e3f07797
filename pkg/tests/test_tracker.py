import numpy as np
import pytest

from _scenes import frame_of, identity, intrinsics, patch_map, perturbed, pose_error
from splatmap import tracker as T
from splatmap.datasets import Frame, SyntheticSpec, generate_synthetic
from splatmap.geometry import CameraPose, quat_from_axis_angle
from splatmap.rasterizer import BackwardOptions, backward, render
from splatmap.scene import GaussianMap


@pytest.fixture(scope="module")
def synthetic():
    scene, frames = generate_synthetic(3, SyntheticSpec(frames=3))
    return scene, frames


def _self_frame(gmap, pose, K):
    out = render(gmap, pose, K)
    return Frame(0.0, out.color, out.depth)


def test_config_defaults_and_validation():
    cfg = T.TrackerConfig()
    assert (cfg.coarse_iterations, cfg.iterations, cfg.lr_t, cfg.lr_q) == (5, 10, 2e-4, 5e-4)
    assert (cfg.w_color, cfg.outlier_factor, cfg.keyframe_interval) == (0.8, 10.0, 30)
    with pytest.raises(ValueError):
        T.TrackerConfig(coarse_iterations=10, iterations=10)
    with pytest.raises(ValueError):
        T.TrackerConfig(keyframe_interval=0)
    with pytest.raises(ValueError):
        T.TrackerConfig(mode="sideways")


def test_select_reliable_surface_and_floater():
    K = intrinsics(16, 12, 15.0)
    gmap = GaussianMap()
    pos = [[0.0, 0.0, 2.0], [0.1, 0.05, 2.0], [-0.1, 0.0, 1.5], [9.0, 0.0, 2.0]]
    gmap.append_raw(pos, np.tile([1.0, 0, 0, 0], (4, 1)), np.full((4, 3), -3.0), np.zeros(4),
                    np.zeros((4, 4, 3)))
    depth = np.full((12, 16), 2.0)
    sel, vis = T.select_reliable(gmap, identity(), depth, K, 0.05)
    assert list(vis) == [0, 1, 2] and list(sel) == [0, 1]
    sel, vis = T.select_reliable(gmap, identity(), depth, K, np.inf)
    assert list(sel) == list(vis)
    sel, _ = T.select_reliable(gmap, identity(), depth, K, 0.0)
    assert list(sel) == [0, 1]
    sel, vis = T.select_reliable(gmap, identity(), np.zeros((12, 16)), K, np.inf)
    assert len(sel) == 0 and len(vis) == 3


def test_select_reliable_empty_map():
    sel, vis = T.select_reliable(GaussianMap(), identity(), np.ones((4, 4)), intrinsics(4, 4, 4.0), 0.05)
    assert len(sel) == 0 and len(vis) == 0


@pytest.mark.parametrize("gap,fraction,expected", [(30, 1.0, True), (1, 0.99, False), (1, 0.10, True),
                                                   (29, 0.85, False)])
def test_keyframe_decision(gap, fraction, expected):
    assert T.keyframe_decision(100 + gap, 100, fraction, T.TrackerConfig(keyframe_interval=30)) is expected


def test_color_loss_masks():
    class Out:
        pass

    out = Out()
    out.color = np.zeros((2, 3, 3))
    out.coverage = np.array([[True, True, True], [True, True, False]])
    target = np.full((2, 3, 3), 0.05)
    target[0, 0] = 1.0  # pixel loss 3.0 against a median of 0.15
    total, mean, grad, keep = T.color_loss(out, target, 1.0, 10.0)
    assert keep.sum() == 4 and not keep[0, 0] and not keep[1, 2]
    assert total == pytest.approx(0.6) and mean == pytest.approx(0.15)
    assert np.all(grad[~keep] == 0)
    total, _, _, keep = T.color_loss(out, target, 1.0, 0.0)
    assert keep.sum() == 5 and total == pytest.approx(3.6)


@pytest.fixture(scope="module")
def patch():
    """A flat patch whose Gaussians all project inside the view and lie on the
    observed surface, so every visible Gaussian is reliable."""
    K = intrinsics(48, 36, 40.0)
    return patch_map(np.random.default_rng(0), 100, half=0.8), K


def test_stationary_at_ground_truth(patch):
    gmap, K = patch
    pose = identity()
    frame = _self_frame(gmap, pose, K)
    out = render(gmap, pose, K)
    _, _, grad, _ = T.color_loss(out, frame.color, 0.8, 0.0)
    g = backward(out, grad, np.zeros(frame.depth.shape), gmap, options=BackwardOptions(pose=True))
    assert np.all(g.pose_t == 0) and np.all(g.pose_q == 0)
    res = T.track(gmap, frame, pose, K, T.TrackerConfig(outlier_factor=0.0))
    assert res.loss == 0.0 and res.reliable_fraction == 1.0
    dt, dr = pose_error(res.pose, pose)
    assert dt < 1e-4 and dr < 1e-4


def test_coarse_render_is_exact_subsample(synthetic):
    scene, _ = synthetic
    import dataclasses
    from splatmap.rasterizer import DEFAULT_SETTINGS
    pose = scene.trajectory.poses[1]
    full = render(scene.gmap, pose, scene.K)
    half = render(scene.gmap, pose, scene.K.scaled(0.5),
                  settings=dataclasses.replace(DEFAULT_SETTINGS, cov_reg=0.25 * DEFAULT_SETTINGS.cov_reg))
    np.testing.assert_allclose(half.color, full.color[::2, ::2], atol=1e-12)


def test_near_ground_truth_stays_put(patch):
    gmap, K = patch
    res = T.track(gmap, frame_of(gmap, identity(), K), identity(), K)
    dt, dr = pose_error(res.pose, identity())
    assert dt < 1e-4 and dr < 1e-4


def test_track_does_not_mutate_map(synthetic):
    scene, frames = synthetic
    before = scene.gmap.checksum()
    start = CameraPose(quat_from_axis_angle([0, 1, 0], 0.01), scene.trajectory.poses[2].translation + 0.01)
    T.track(scene.gmap, frames[2], start, scene.K)
    assert scene.gmap.checksum() == before


def _stage_losses(seeds):
    rows = []
    for seed in seeds:
        scene, frames = generate_synthetic(seed, SyntheticSpec(frames=2))
        gt = scene.trajectory.poses[1]
        start = perturbed(np.random.default_rng(seed), gt, 0.5, 0.005)
        res = T.track(scene.gmap, frames[1], start, scene.K, T.TrackerConfig(lr_decay=0.1))
        assert 0.0 <= res.reliable_fraction <= 1.0
        rows.append((res.coarse_loss, res.loss))
    return np.array(rows)


def test_fine_stage_lowers_loss_typically():
    rows = _stage_losses(range(8))
    assert np.median(rows[:, 1] / rows[:, 0]) <= 1.0


@pytest.mark.xfail(strict=True, reason="the fine stage renders only the reliable subset, whose optimum is "
                                       "offset from the whole-map optimum; on some seeds the whole-map loss rises")
def test_fine_stage_never_raises_loss():
    rows = _stage_losses(range(8))
    assert np.all(rows[:, 1] <= rows[:, 0])


def test_no_coverage_gives_zero_fraction():
    K = intrinsics(16, 12, 15.0)
    gmap = patch_map(np.random.default_rng(0), 4, half=0.2)
    away = CameraPose(quat_from_axis_angle([0, 1, 0], np.pi), [0, 0, 0])
    frame = Frame(0.0, np.zeros((12, 16, 3)), np.ones((12, 16)))
    res = T.track(gmap, frame, away, K)
    assert res.reliable_fraction == 0.0
    assert np.array_equal(res.pose.translation, away.translation)


def test_modes_run(synthetic):
    scene, frames = synthetic
    for mode in T.MODES:
        res = T.track(scene.gmap, frames[1], scene.trajectory.poses[1], scene.K, T.TrackerConfig(mode=mode))
        assert res.iterations == 10 and np.isfinite(res.loss)
