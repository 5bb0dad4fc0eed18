import numpy as np
import pytest

from radarsnn.backbone import BackboneConfig, Detector, DetectorConfig
from radarsnn.engine import InferenceEngine
from radarsnn.head import HeadConfig, decode, flatten_head, make_anchors
from radarsnn.points import VoxelGridSpec, bti_cascade, voxelize
from radarsnn.scene import SceneConfig, frame_seed, generate_frame

GRID = VoxelGridSpec(x_range=(0, 16), y_range=(-8, 8), z_range=(-1, 3), shape=(4, 16, 16))
CFG = DetectorConfig(grid=GRID, backbone=BackboneConfig(grid_shape=(4, 16, 16), widths=(4, 4, 4),
                                                        bev_channels=(4, 4, 4)),
                     head=HeadConfig(score_threshold=0.0))
SCENE = SceneConfig(x_range=GRID.x_range, y_range=GRID.y_range, z_range=GRID.z_range, vehicles=(1, 2))


@pytest.fixture(scope="module")
def model():
    m = Detector(CFG, "snn", seed=3)
    for name in m.lif_block_names():
        m.buffers[name + ".bn.running_var"][:] = 0.02  # make the untrained net spike
    return m


@pytest.fixture(scope="module")
def clouds():
    return [generate_frame(SCENE, frame_seed(0, i), f"f{i}").cloud for i in range(3)]


def test_single_step_is_plain_forward(model, clouds):
    res = InferenceEngine(model).run_frame(clouds[0])
    direct = model.forward(voxelize(clouds[0], GRID).values[None])["head"][0]
    np.testing.assert_array_equal(res.head, direct)
    assert res.step_sizes == [len(clouds[0])]


def test_cascade_sizes_and_billing(model, clouds):
    one = InferenceEngine(model, count_mode="dense").run_frame(clouds[0])
    three = InferenceEngine(model, r=80, steps=3, count_mode="dense").run_frame(clouds[0])
    n = len(clouds[0])
    assert three.step_sizes == [len(c) for c in bti_cascade(clouds[0], 80, 3)]
    assert three.step_sizes[2] == int(np.ceil(0.8 * np.ceil(0.8 * n)))
    assert three.ledger.mac == 3 * one.ledger.mac
    assert three.ledger.ac > 0


def test_reset_between_steps_sees_last_cloud_only(model, clouds):
    res = InferenceEngine(model, r=80, steps=3, reset_between_steps=True).run_frame(clouds[1])
    last = bti_cascade(clouds[1], 80, 3)[-1]
    direct = model.forward(voxelize(last, GRID).values[None])["head"][0]
    np.testing.assert_array_equal(res.head, direct)


def test_membrane_persists_across_steps(model, clouds):
    keep = InferenceEngine(model, r=80, steps=3).run_frame(clouds[1])
    reset = InferenceEngine(model, r=80, steps=3, reset_between_steps=True).run_frame(clouds[1])
    assert not np.array_equal(keep.head, reset.head)


def test_states_cleared_between_frames(model, clouds):
    eng = InferenceEngine(model, r=80, steps=3)
    eng.run_frame(clouds[0])
    after = eng.run_frame(clouds[2])
    fresh = InferenceEngine(model, r=80, steps=3).run_frame(clouds[2])
    np.testing.assert_array_equal(after.head, fresh.head)


def test_detections_from_last_step(model, clouds):
    res = InferenceEngine(model, r=80, steps=2, reset_between_steps=True).run_frame(clouds[0])
    assert len(res.detections) >= 1
    rows = flatten_head(res.head, CFG.head.anchors.count)
    best = decode(rows, make_anchors(GRID, CFG.head.anchors), 0.0)
    assert max(d.score for d in res.detections) == pytest.approx(max(d.score for d in best))


def test_ann_rejects_cascade():
    ann = Detector(CFG, "ann")
    with pytest.raises(ValueError):
        InferenceEngine(ann, r=80, steps=3)
    with pytest.raises(ValueError):
        InferenceEngine(Detector(CFG, "snn"), steps=2)


def test_ann_ledger_has_no_ac(clouds):
    _, ledger, n = InferenceEngine(Detector(CFG, "ann")).run(clouds)
    assert n == 3 and ledger.ac == 0 and ledger.mac > 0


def test_event_counting_not_above_dense(model, clouds):
    _, dense, _ = InferenceEngine(model, count_mode="dense").run(clouds)
    _, event, _ = InferenceEngine(model, count_mode="event").run(clouds)
    assert event.mac <= dense.mac
    assert event.ac == dense.ac
