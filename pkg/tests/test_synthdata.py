import numpy as np
import pytest

from memdepth.flow import backward_warp
from memdepth.synthdata import (ObjectSpec, SceneError, SceneSpec, generate_dataset, generate_scene,
                                random_scene, read_dataset, read_pgm, write_dataset)


def _disk_scene(velocity=(1, 0), frames=4, subpixel=False, position=(30, 30)):
    disk = ObjectSpec("disk", (6, 6), position, velocity, 2.0, (0.9, 0.2, 0.1))
    return SceneSpec(32, 48, frames, 10.0, (disk,), subpixel=subpixel)


def test_static_scene_has_zero_flow_and_identical_frames():
    records = generate_scene(_disk_scene(velocity=(0, 0)), seed=1)
    for r in records:
        assert not r.flow_bw.as_array().any() and not r.flow_fw.as_array().any()
        assert r.image.tobytes() == records[0].image.tobytes()
        assert r.mask.all()


def test_moving_disk_flow_and_disocclusion():
    spec = _disk_scene()
    records = generate_scene(spec, seed=2)
    ys, xs = np.mgrid[0:32, 0:48]
    for t in range(1, spec.frames):
        on_disk = (xs - (30 + t)) ** 2 + (ys - 30) ** 2 <= 36
        was_disk = (xs - (30 + t - 1)) ** 2 + (ys - 30) ** 2 <= 36
        bw = records[t].flow_bw
        np.testing.assert_array_equal(bw.u[on_disk], -1.0)
        np.testing.assert_array_equal(bw.u[~on_disk], 0.0)
        np.testing.assert_array_equal(bw.v, 0.0)
        np.testing.assert_array_equal(records[t].depth[on_disk], 2.0)
        np.testing.assert_array_equal(records[t].depth[~on_disk], 10.0)
        disoccluded = was_disk & ~on_disk
        assert disoccluded.any() and not records[t].mask[disoccluded].any()
        np.testing.assert_array_equal(records[t].flow_fw.u[was_disk], 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_integer_scenes_warp_exactly(seed):
    for records in generate_dataset(2, frames=5, height=32, width=32, seed=seed):
        for t in range(1, len(records)):
            warped, valid = backward_warp(records[t - 1].image, records[t].flow_bw)
            m = valid & records[t].mask
            assert m.mean() > 0.5
            assert np.array_equal(warped[:, m], records[t].image[:, m])
            dw, _ = backward_warp(records[t - 1].depth, records[t].flow_bw)
            assert np.array_equal(dw[m], records[t].depth[m])


def test_subpixel_scene_warps_within_bilinear_tolerance():
    spec = _disk_scene(velocity=(0.5, 0.25), subpixel=True, position=(20.3, 15.6))
    records = generate_scene(spec, seed=0)
    for t in range(1, spec.frames):
        warped, valid = backward_warp(records[t - 1].image.astype(np.float64), records[t].flow_bw)
        m = valid & records[t].mask
        assert np.max(np.abs(warped[:, m] - records[t].image[:, m])) <= 1e-6


def test_depth_is_nearest_surface():
    near = ObjectSpec("rect", (10, 10), (10, 10), (0, 0), 3.0, (1, 1, 1))
    far = ObjectSpec("rect", (10, 10), (15, 10), (0, 0), 6.0, (0, 0, 0))
    records = generate_scene(SceneSpec(32, 32, 1, 10.0, (far, near)), seed=0)
    d = records[0].depth
    assert d[12, 16] == 3.0 and d[12, 22] == 6.0 and d[0, 0] == 10.0


def test_generation_is_bitwise_reproducible():
    a = generate_dataset(2, frames=3, height=32, width=32, seed=7)
    b = generate_dataset(2, frames=3, height=32, width=32, seed=7)
    for ra, rb in zip(a, b):
        for x, y in zip(ra, rb):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.depth.tobytes() == y.depth.tobytes()
            assert x.flow_bw.as_array().tobytes() == y.flow_bw.as_array().tobytes()


@pytest.mark.parametrize("bad,match", [
    (dict(height=30), "divisible"),
    (dict(objects=(ObjectSpec("cube", (4, 4), (5, 5), (0, 0), 2.0, (0, 0, 0)),)), "unknown shape"),
    (dict(objects=(ObjectSpec("rect", (4, 4), (5, 5), (0, 0), 12.0, (0, 0, 0)),)), "depth"),
    (dict(objects=(ObjectSpec("rect", (4, 4), (5, 5), (0.5, 0), 2.0, (0, 0, 0)),)), "integer"),
    (dict(objects=(ObjectSpec("rect", (4, 4), (20, 5), (9, 0), 2.0, (0, 0, 0)),)), "leaves the frame"),
])
def test_scene_validation(bad, match):
    kwargs = dict(height=32, width=32, frames=3)
    kwargs.update(bad)
    with pytest.raises(SceneError, match=match):
        generate_scene(SceneSpec(**kwargs))


def test_random_scene_is_valid_and_moving():
    rng = np.random.default_rng(0)
    for _ in range(20):
        spec = random_scene(rng)
        spec.validate()
        assert all(ob.velocity != (0, 0) for ob in spec.objects)


def test_dataset_round_trip_is_bitwise(tmp_path):
    data = generate_dataset(2, frames=3, height=32, width=32, seed=3)
    write_dataset(data, tmp_path)
    assert (tmp_path / "index.txt").read_text().splitlines() == [
        "# memdepth dataset v1", "seq_0 3 32 32", "seq_1 3 32 32"]
    for name in ["img_0.pgm", "img_0.f32", "depth_0.f32", "depth_0.pgm", "flow_fw_1.flo", "flow_bw_1.flo"]:
        assert (tmp_path / "seq_0" / name).is_file()
    back = read_dataset(tmp_path)
    for ra, rb in zip(data, back):
        for x, y in zip(ra, rb):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.depth.tobytes() == y.depth.tobytes()
            assert x.flow_fw.as_array().tobytes() == y.flow_fw.as_array().tobytes()
            assert x.flow_bw.as_array().tobytes() == y.flow_bw.as_array().tobytes()
            np.testing.assert_array_equal(x.mask, y.mask)


def test_depth_pgm_is_millimetres(tmp_path):
    data = generate_dataset(1, frames=1, height=32, width=32, seed=0)
    write_dataset(data, tmp_path)
    pgm = read_pgm(tmp_path / "seq_0" / "depth_0.pgm")
    np.testing.assert_array_equal(pgm, np.round(data[0][0].depth * 1000).astype(np.uint16))


def test_missing_flow_file_is_named(tmp_path):
    write_dataset(generate_dataset(1, frames=2, height=32, width=32, seed=0), tmp_path)
    (tmp_path / "seq_0" / "flow_bw_1.flo").unlink()
    with pytest.raises(FileNotFoundError, match="flow_bw_1.flo"):
        read_dataset(tmp_path)
