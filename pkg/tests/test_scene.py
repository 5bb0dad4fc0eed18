import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radarsnn.boxes import rotated_iou_bev
from radarsnn.points import VoxelGridSpec, bti_filter
from radarsnn.scene import (SceneConfig, frame_digest, frame_seed, generate_dataset, generate_frame,
                            read_manifest)

from oracles import inside_box_bev

CFG = SceneConfig(x_range=(0, 32), y_range=(-16, 16), z_range=(-1, 4))


def test_deterministic():
    a = generate_frame(CFG, frame_seed(3, 7), "a")
    b = generate_frame(CFG, frame_seed(3, 7), "a")
    assert a.cloud == b.cloud and a.gts == b.gts


def test_no_vehicles_all_noise():
    f = generate_frame(SceneConfig(vehicles=(0, 0)), frame_seed(0, 0))
    assert f.gts == [] and f.is_noise.all() and len(f.cloud) == 200


def test_noise_share_large_frame():
    cfg = SceneConfig(vehicles=(4, 4), points_per_vehicle=(1250, 1250), noise_fraction=0.5)
    f = generate_frame(cfg, frame_seed(1, 0))
    assert len(f.cloud) == 10000
    assert 0.47 <= f.noise_fraction <= 0.53


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 1000))
def test_target_points_on_their_box(base, idx):
    f = generate_frame(CFG, frame_seed(base, idx))
    pts = f.cloud.points.astype(np.float64)
    for j, box in enumerate(f.gts):
        mine = pts[f.owner == j]
        # grow the box by the tolerance and test membership
        grown = type(box)(box.cx, box.cy, box.cz, box.l + 0.2, box.w + 0.2, box.h + 0.2, box.yaw)
        assert inside_box_bev(mine[:, 0], mine[:, 1], grown).all()
        assert np.all(np.abs(mine[:, 2] - box.cz) <= box.h / 2 + 0.1)
    for i in range(len(f.gts)):
        for k in range(i + 1, len(f.gts)):
            assert rotated_iou_bev(f.gts[i], f.gts[k]) == 0.0
    assert all(-np.pi < b.yaw <= np.pi for b in f.gts)


def test_noise_power_lower_on_average():
    f = generate_frame(CFG, frame_seed(5, 1))
    p = f.cloud.power
    assert np.median(p[f.is_noise]) < np.median(p[~f.is_noise])


def test_bti_suppresses_noise_mostly():
    better = 0
    for i in range(30):
        f = generate_frame(CFG, frame_seed(11, i))
        keep = bti_filter(f.cloud, 80)
        kept_rows = {r.tobytes() for r in keep.points}
        mask = np.array([r.tobytes() in kept_rows for r in f.cloud.points])
        better += f.is_noise[mask].mean() < f.is_noise.mean()
    assert better >= 28


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(noise_fraction=1.0)
    with pytest.raises(ValueError):
        SceneConfig(vehicles=(3, 1))
    with pytest.raises(ValueError):
        SceneConfig(x_range=(5, 5))
    with pytest.raises(ValueError):
        SceneConfig().check_inside(VoxelGridSpec(x_range=(0, 10)))


def test_dataset_round_trip(tmp_path):
    manifest = generate_dataset(CFG, 5, 42, tmp_path / "a")
    assert len(manifest) == 5
    back = read_manifest(tmp_path / "a" / "manifest.csv")
    assert back.frames == manifest.frames
    for (name, cloud, gts), i in zip(back.load_frames(), range(5)):
        mem = generate_frame(CFG, frame_seed(42, i))
        np.testing.assert_array_equal(cloud.points, mem.cloud.points)
        assert len(gts) == len(mem.gts)
        for g, m in zip(gts, mem.gts):
            np.testing.assert_allclose(g.to_array(), m.to_array(), rtol=0, atol=0)


def test_dataset_rerun_identical_bytes(tmp_path):
    generate_dataset(CFG, 3, 1, tmp_path / "a")
    generate_dataset(CFG, 3, 1, tmp_path / "b")
    for rel in ["manifest.csv", "frames/frame_00000.rpc5", "frames/frame_00002.rpc5"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_disjoint_seeds_distinct():
    digests = {frame_digest(generate_frame(CFG, frame_seed(s, i)).cloud) for s in (1, 2) for i in range(10)}
    assert len(digests) == 20


def test_empty_frame_in_manifest(tmp_path):
    cfg = SceneConfig(x_range=(0, 32), y_range=(-16, 16), z_range=(-1, 4), vehicles=(0, 0))
    generate_dataset(cfg, 2, 0, tmp_path)
    back = read_manifest(tmp_path / "manifest.csv")
    assert len(back) == 2 and all(not b for b in back.boxes.values())
