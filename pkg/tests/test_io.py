import numpy as np
import pytest

from pose4d.geometry import DepthMap, PointCloud, look_at
from pose4d.io import (
    dumps,
    load_frame,
    load_frames,
    read_depth_png,
    read_json,
    read_ply,
    read_png,
    save_frame,
    savez_stable,
    sha256_file,
    write_depth_png,
    write_json,
    write_ply,
    write_png,
)
from pose4d.scenesim import make_dynamic_scene, render_sequence
from pose4d.trajectory import TrajectoryParams, generate_trajectory


def test_ply_round_trip(tmp_path, rng):
    pts = rng.normal(size=(40, 3))
    cols = rng.integers(0, 256, (40, 3)) / 255.0
    write_ply(tmp_path / "a.ply", PointCloud(pts, cols))
    back = read_ply(tmp_path / "a.ply")
    np.testing.assert_array_equal(back.points, pts)
    np.testing.assert_allclose(back.colors, cols, atol=1e-15)


def test_ply_empty_and_single(tmp_path):
    write_ply(tmp_path / "e.ply", PointCloud.empty())
    assert len(read_ply(tmp_path / "e.ply")) == 0
    write_ply(tmp_path / "s.ply", PointCloud([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(read_ply(tmp_path / "s.ply").points, [[1, 2, 3]])


def test_ply_rejects_other_files(tmp_path):
    (tmp_path / "x.ply").write_text("solid\n")
    with pytest.raises(ValueError):
        read_ply(tmp_path / "x.ply")


def test_png_round_trip(tmp_path, rng):
    rgb = rng.integers(0, 256, (6, 5, 3)) / 255.0
    write_png(tmp_path / "a.png", rgb)
    np.testing.assert_allclose(read_png(tmp_path / "a.png"), rgb, atol=1e-15)


def test_depth_png_round_trip(tmp_path, rng):
    values = rng.uniform(0.5, 4.0, (7, 9))
    valid = rng.random((7, 9)) > 0.3
    scale = write_depth_png(tmp_path / "d.png", DepthMap(values, valid))
    back = read_depth_png(tmp_path / "d.png", scale)
    np.testing.assert_array_equal(back.valid, valid)
    assert np.max(np.abs(back.values[valid] - values[valid])) <= scale / 2 + 1e-12


def test_depth_png_far_values_use_coarser_unit(tmp_path):
    values = np.full((2, 2), 50.0)
    scale = write_depth_png(tmp_path / "d.png", DepthMap(values, np.ones((2, 2), bool)))
    assert scale > 1e-4
    np.testing.assert_allclose(read_depth_png(tmp_path / "d.png", scale).values, 50.0, rtol=1e-4)


def test_savez_stable_is_byte_reproducible(tmp_path, rng):
    a = rng.normal(size=(3, 4))
    savez_stable(tmp_path / "a.npz", b=a, a=a > 0)
    savez_stable(tmp_path / "b.npz", a=a > 0, b=a)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    z = np.load(tmp_path / "a.npz")
    np.testing.assert_array_equal(z["b"], a)


def test_json_helpers(tmp_path):
    obj = {"b": [1, 2.5], "a": {"z": None}}
    write_json(tmp_path / "o.json", obj)
    assert read_json(tmp_path / "o.json") == obj
    assert dumps(obj).index('"a"') < dumps(obj).index('"b"')
    assert len(sha256_file(tmp_path / "o.json")) == 64


def test_frame_round_trip(tmp_path, K64):
    poses = generate_trajectory("zoom_in", TrajectoryParams(2, look_at([0, -0.3, -2.5], [0, 0, 0])))
    frames = render_sequence(make_dynamic_scene(seed=0, n_background=300, n_cluster=100), poses, K64)
    for f in frames:
        save_frame(tmp_path, f)
    back = load_frames(tmp_path)
    assert [f.time for f in back] == [0, 1]
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.depth.values, b.depth.values)
        np.testing.assert_array_equal(a.depth.coords, b.depth.coords)
        np.testing.assert_array_equal(a.dynamic, b.dynamic)
        np.testing.assert_allclose(a.pose.as_matrix(), b.pose.as_matrix(), atol=0)
        assert a.intrinsics == b.intrinsics


def test_frame_falls_back_to_pngs(tmp_path, K64):
    poses = generate_trajectory("stationary", TrajectoryParams(1, look_at([0, -0.3, -2.5], [0, 0, 0])))
    frame = render_sequence(make_dynamic_scene(seed=0, n_background=300, n_cluster=100), poses, K64)[0]
    sidecar = save_frame(tmp_path, frame)
    (tmp_path / "frame_0000.npz").unlink()
    back = load_frame(sidecar)
    np.testing.assert_array_equal(back.depth.valid, frame.depth.valid)
    np.testing.assert_allclose(back.rgb, frame.rgb, atol=0.5 / 255 + 1e-12)
