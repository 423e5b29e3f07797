import numpy as np
import pytest
from PIL import Image

from splatmap import datasets as D
from splatmap.errors import MalformedLine, MissingIndexFile, NoAssociations
from splatmap.geometry import CameraPose, quat_normalize
from splatmap.rasterizer import render_naive


def _write_seq(root, rgb_ts, depth_ts, size=(8, 6), gt=True):
    (root / "rgb").mkdir()
    (root / "depth").mkdir()
    rgb_lines, depth_lines = ["# rgb"], ["# depth"]
    for i, t in enumerate(rgb_ts):
        Image.fromarray(np.full((size[1], size[0], 3), 10 * i, np.uint8)).save(root / f"rgb/{i}.png")
        rgb_lines.append(f"{t:.6f} rgb/{i}.png")
    for i, t in enumerate(depth_ts):
        raw = np.full((size[1], size[0]), 5000, np.uint16)
        raw[0, 0] = 0
        Image.fromarray(raw).save(root / f"depth/{i}.png")
        depth_lines.append(f"{t:.6f} depth/{i}.png")
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    if gt:
        (root / "groundtruth.txt").write_text("# gt\n" + "".join(
            f"{t:.6f} 0 0 {0.1 * i} 0 0 0 1\n" for i, t in enumerate(rgb_ts)))


def test_tum_three_pairs(tmp_path):
    _write_seq(tmp_path, [1.0, 2.0, 3.0], [1.01, 2.01, 3.01])
    frames, gt, K = D.load_tum_sequence(tmp_path)
    assert len(frames) == 3 and len(gt) == 3
    assert (K.width, K.height) == (8, 6)
    fr = list(frames)
    assert fr[1].color[0, 0, 0] == pytest.approx(10 / 255)
    assert fr[0].depth[1, 1] == 1.0 and fr[0].depth[0, 0] == 0.0
    assert fr[2].timestamp == 3.0


def test_tum_drops_far_depth(tmp_path):
    _write_seq(tmp_path, [1.0, 2.0, 3.0], [1.0, 2.5, 3.0], gt=False)
    frames, gt, _ = D.load_tum_sequence(tmp_path)
    assert frames.timestamps == [1.0, 3.0] and len(gt) == 0


def test_tum_errors(tmp_path):
    with pytest.raises(MissingIndexFile):
        D.load_tum_sequence(tmp_path)
    _write_seq(tmp_path, [1.0], [5.0])
    with pytest.raises(NoAssociations):
        D.load_tum_sequence(tmp_path)
    (tmp_path / "rgb.txt").write_text("1.0 rgb/0.png\nnot-a-line\n")
    with pytest.raises(MalformedLine) as e:
        D.load_tum_sequence(tmp_path)
    assert e.value.line_no == 2


def test_association_stable(tmp_path):
    _write_seq(tmp_path, [1.0, 1.03, 1.07, 2.0], [1.01, 1.04, 1.075, 1.99], gt=False)
    a = D.load_tum_sequence(tmp_path)[0].timestamps
    b = D.load_tum_sequence(tmp_path)[0].timestamps
    assert a == b == [1.0, 1.03, 1.07, 2.0]


def test_depth_decode(tmp_path):
    raw = np.array([[5000, 0], [10000, 65535]], np.uint16)
    Image.fromarray(raw).save(tmp_path / "d.png")
    d = D.load_depth_png(tmp_path / "d.png")
    assert d[0, 0] == 1.0 and d[0, 1] == 0.0 and d[1, 0] == 2.0
    D.save_depth_png(tmp_path / "e.png", d, D.TUM_DEPTH_SCALE)
    assert np.array_equal(np.asarray(Image.open(tmp_path / "e.png")), raw)


def _random_traj(rng, n):
    t = D.Trajectory()
    for i in range(n):
        t.append(i * 0.033 + rng.random() * 1e-3, CameraPose(quat_normalize(rng.normal(size=4)), rng.normal(size=3)))
    return t


def test_trajectory_round_trip(tmp_path, rng):
    t = _random_traj(rng, 20)
    D.write_trajectory(tmp_path / "t.txt", t)
    back = D.read_trajectory(tmp_path / "t.txt")
    assert len(back) == 20
    for (ta, pa), (tb, pb) in zip(t, back):
        assert abs(ta - tb) <= 1e-9
        assert np.max(np.abs(pa.translation - pb.translation)) <= 1e-9
        assert np.max(np.abs(pa.rotation - pb.rotation)) <= 1e-9


def test_empty_trajectory(tmp_path):
    D.write_trajectory(tmp_path / "t.txt", D.Trajectory())
    assert (tmp_path / "t.txt").read_text().startswith("#")
    assert len(D.read_trajectory(tmp_path / "t.txt")) == 0


def test_malformed_trajectory(tmp_path):
    (tmp_path / "t.txt").write_text("# h\n0 0 0 0 0 0 0 1\n1 0 0 0 0 0 1\n")
    with pytest.raises(MalformedLine) as e:
        D.read_trajectory(tmp_path / "t.txt")
    assert e.value.line_no == 3 and "t.txt" in str(e.value)


def test_timestamps_non_decreasing():
    t = D.Trajectory()
    t.append(1.0, CameraPose())
    with pytest.raises(ValueError):
        t.append(0.5, CameraPose())


def test_synthetic_deterministic():
    spec = D.SyntheticSpec(frames=3, color_noise=0.01, depth_noise=0.002)
    s1, f1 = D.generate_synthetic(5, spec)
    s2, f2 = D.generate_synthetic(5, spec)
    assert s1.gmap.checksum() == s2.gmap.checksum()
    for a, b in zip(f1, f2):
        assert np.array_equal(a.color, b.color) and np.array_equal(a.depth, b.depth)
    s3, _ = D.generate_synthetic(6, spec)
    assert s3.gmap.checksum() != s1.gmap.checksum()


def test_noise_free_frames_are_oracle_renders():
    scene, frames = D.generate_synthetic(1, D.SyntheticSpec(frames=3))
    for pose, fr in zip(scene.trajectory.poses, frames):
        ref = render_naive(scene.gmap, pose, scene.K, background=scene.background)
        assert np.array_equal(fr.color, ref.color) and np.array_equal(fr.depth, ref.depth)
        assert (fr.depth > 0).any()


@pytest.mark.parametrize("kind", ["orbit", "line"])
def test_constant_relative_motion(kind):
    spec = D.SyntheticSpec(frames=100, trajectory=kind, step=0.003)
    poses = [D.synthetic_pose(spec, k) for k in range(100)]
    ref = poses[0].inverse().compose(poses[1])
    for a, b in zip(poses[:-1], poses[1:]):
        d = a.inverse().compose(b)
        assert np.max(np.abs(d.translation - ref.translation)) <= 1e-12
        assert np.max(np.abs(d.rotation - ref.rotation)) <= 1e-12


def test_relief_leaves_default_scene_alone():
    a = D.build_synthetic_map(np.random.default_rng(0), D.SyntheticSpec())
    b = D.build_synthetic_map(np.random.default_rng(0), D.SyntheticSpec(wall_relief=0.0, relief_period=3.0))
    assert a.checksum() == b.checksum()
    c = D.build_synthetic_map(np.random.default_rng(0), D.SyntheticSpec(wall_relief=0.1))
    assert np.ptp(c.positions[:, 2]) > np.ptp(a.positions[:, 2])


def test_frame_stream_prefetch_and_errors():
    calls = []

    def make(i):
        def load():
            calls.append(i)
            if i == 3:
                raise OSError("broken frame")
            return D.Frame(float(i), np.zeros((1, 1, 3)), np.zeros((1, 1)))
        return load

    stream = D.FrameStream([make(i) for i in range(5)], range(5))
    assert len(stream) == 5 and len(stream.head(2)) == 2
    got = []
    with pytest.raises(OSError):
        for fr in stream:
            got.append(fr.timestamp)
    assert got == [0.0, 1.0, 2.0]
    first = next(iter(stream.head(3)))
    assert first.timestamp == 0.0


def test_count_heatmap(tmp_path):
    D.save_count_pgm(tmp_path / "c.pgm", np.array([[0, 2], [4, 1]]))
    img = np.asarray(Image.open(tmp_path / "c.pgm"))
    assert img.tolist() == [[0, 128], [255, 64]]
