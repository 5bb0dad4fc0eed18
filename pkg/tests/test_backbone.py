import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radarsnn import kernels, ops
from radarsnn.backbone import (BackboneConfig, BatchNormParams, ConvBlockSpec, Detector, DetectorConfig,
                               FeatureMap, backbone_forward, bev_project, bev_upsample_concat,
                               conv_block_forward, conv3d, event_driven_conv3d)
from radarsnn.energy import OpLedger
from radarsnn.head import HeadConfig
from radarsnn.lif import MembraneState
from radarsnn.points import VoxelFeatureGrid, VoxelGridSpec


def naive_conv3d(x, w, b, stride, pad):
    """Loop-per-output reference cross-correlation, one frame."""
    cin, Z, Y, X = x.shape
    cout, _, kz, ky, kx = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (pad,) * 2, (pad,) * 2, (pad,) * 2))
    zo, yo, xo = ((Z + 2 * pad - kz) // stride + 1, (Y + 2 * pad - ky) // stride + 1,
                  (X + 2 * pad - kx) // stride + 1)
    out = np.zeros((cout, zo, yo, xo))
    for o in range(cout):
        for z in range(zo):
            for y in range(yo):
                for xx in range(xo):
                    win = xp[:, z * stride:z * stride + kz, y * stride:y * stride + ky, xx * stride:xx * stride + kx]
                    out[o, z, y, xx] = (win * w[o]).sum() + (0 if b is None else b[o])
    return out


def sparse_binary(rng, shape, density):
    return (rng.random(shape) < density).astype(np.float32)


# --- conv ------------------------------------------------------------------

def test_scalar_conv():
    spec = ConvBlockSpec(np.full((1, 1, 1, 1, 1), 3.0), bias=np.array([1.0]), activation="none")
    assert conv3d(FeatureMap(np.full((1, 1, 1, 1), 2.0)), spec)[0, 0, 0, 0] == 7.0


def test_identity_kernel():
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1
    x = np.random.default_rng(0).normal(size=(1, 4, 5, 6))
    np.testing.assert_array_equal(conv3d(FeatureMap(x), ConvBlockSpec(w, activation="none")), x)


def test_zero_input_bias_only():
    w = np.ones((2, 1, 3, 3, 3))
    spec = ConvBlockSpec(w, bias=np.array([0.5, -1.0]), activation="none")
    led = OpLedger(mode="event")
    out = conv3d(FeatureMap(np.zeros((1, 4, 4, 4))), spec, led)
    assert np.all(out[0] == 0.5) and np.all(out[1] == -1.0)
    assert led.mac == 0


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_naive(stride):
    rng = np.random.default_rng(stride)
    x = rng.normal(size=(3, 5, 6, 4))
    w = rng.normal(size=(2, 3, 3, 3, 3))
    b = rng.normal(size=2)
    got = ops.conv3d(x[None], w, b, stride, 1)[0]
    np.testing.assert_allclose(got, naive_conv3d(x, w, b, stride, 1), rtol=1e-12, atol=1e-12)


def test_dense_ledger_is_analytic():
    x = np.ones((1, 3, 4, 6, 6))
    led = OpLedger(mode="dense")
    out = ops.conv3d(x, np.ones((5, 3, 3, 3, 3)), None, 2, 1, ledger=led, layer="c")
    assert led.mac == out[0].size * 3 * 27 and led.ac == 0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        ops.conv3d(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))


# --- event-driven path -----------------------------------------------------

def test_event_requires_spikes():
    spec = ConvBlockSpec(np.ones((1, 1, 3, 3, 3)), activation="none")
    with pytest.raises(ValueError, match="event-driven path requires spikes"):
        event_driven_conv3d(FeatureMap(np.full((1, 3, 3, 3), 0.5)), spec)


def test_single_interior_spike_taps():
    x = np.zeros((1, 5, 5, 5), np.float32)
    x[0, 2, 2, 2] = 1
    led = OpLedger()
    spec = ConvBlockSpec(np.ones((1, 1, 3, 3, 3), np.float32), activation="none")
    event_driven_conv3d(FeatureMap(x, binary=True), spec, led)
    assert (led.mac, led.ac) == (0, 27)


def test_corner_spike_taps():
    x = np.zeros((1, 4, 4, 4), np.float32)
    x[0, 0, 0, 0] = 1
    led = OpLedger()
    ops.event_conv3d(x[None], np.ones((2, 1, 3, 3, 3), np.float32), None, 1, 1, ledger=led)
    assert led.ac == 8 * 2


def test_zero_spikes():
    led = OpLedger()
    out = ops.event_conv3d(np.zeros((1, 1, 3, 3, 3), np.float32), np.ones((1, 1, 3, 3, 3), np.float32),
                           np.array([2.0], np.float32), ledger=led)
    assert np.all(out == 2.0) and led.ac == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1, 2]), st.floats(0, 0.1), st.sampled_from([1, 3]))
def test_event_equals_dense(seed, stride, density, k):
    rng = np.random.default_rng(seed)
    x = sparse_binary(rng, (1, 2, 4, 6, 6), density)
    w = rng.normal(size=(3, 2, k, k, k)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    pad = k // 2
    led = OpLedger(mode="event")
    dense = ops.conv3d(x, w, b, stride, pad, ledger=led)
    event = ops.event_conv3d(x, w, b, stride, pad, ledger=led)
    np.testing.assert_array_max_ulp(event, dense, maxulp=1)
    assert led.layers["conv"][0] == led.layers["conv"][1]  # real-input MACs == event ACs


@pytest.mark.skipif("compiled" not in kernels.BACKENDS, reason="extension not built")
def test_backends_agree():
    rng = np.random.default_rng(5)
    x = sparse_binary(rng, (1, 3, 6, 8, 8), 0.1)
    w = rng.normal(size=(4, 3, 3, 3, 3)).astype(np.float32)
    a = ops.event_conv3d(x, w, None, 2, 1, backend="python")
    c = ops.event_conv3d(x, w, None, 2, 1, backend="compiled")
    # float64 accumulation in both, summed in different orders
    np.testing.assert_array_max_ulp(a, c, maxulp=1)


def test_valid_tap_counts_bruteforce():
    for n, k, s, p in [(5, 3, 1, 1), (6, 3, 2, 1), (4, 1, 1, 0), (7, 5, 2, 2)]:
        n_out = (n + 2 * p - k) // s + 1
        brute = [sum(1 for t in range(k) if (i + p - t) % s == 0 and 0 <= (i + p - t) // s < n_out
                     and i + p - t >= 0) for i in range(n)]
        assert ops.valid_tap_counts(n, k, s, p, n_out).tolist() == brute


# --- blocks ----------------------------------------------------------------

def _spec(act, cin=1, cout=1, value=1.0):
    w = np.zeros((cout, cin, 3, 3, 3), np.float32)
    w[:, :, 1, 1, 1] = value
    return ConvBlockSpec(w, BatchNormParams.identity(cout), None, 1, act, "b")


def test_relu_block_clamps():
    out, state = conv_block_forward(FeatureMap(np.full((1, 2, 2, 2), -1.0, np.float32)), _spec("relu"))
    assert state is None and not out.binary and np.all(out.values == 0)


def test_identity_bn_passthrough():
    x = np.random.default_rng(0).normal(size=(1, 2, 3, 3)).astype(np.float32)
    out, _ = conv_block_forward(FeatureMap(x), _spec("none"))
    np.testing.assert_allclose(out.values, x / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_lif_block_binary_and_needs_state():
    x = np.random.default_rng(0).uniform(0, 2.5, size=(1, 2, 3, 3)).astype(np.float32)
    spec = _spec("lif")
    with pytest.raises(ValueError, match="membrane state"):
        conv_block_forward(FeatureMap(x), spec)
    out, state = conv_block_forward(FeatureMap(x), spec, MembraneState.fresh((1, 2, 3, 3)))
    assert out.binary and ops.is_binary(out.values)
    assert state.shape == (1, 2, 3, 3)


def test_bev_project_mean_and_slice():
    x = np.random.default_rng(0).normal(size=(1, 4, 3, 3))
    mean = bev_project(FeatureMap(x), np.full((1, 1, 4, 1, 1), 0.25))
    np.testing.assert_allclose(mean, x.mean(axis=1), rtol=1e-12)
    onehot = np.zeros((1, 1, 4, 1, 1))
    onehot[0, 0, 0] = 1
    np.testing.assert_array_equal(bev_project(FeatureMap(x), onehot), x[:, 0])
    np.testing.assert_array_equal(bev_project(FeatureMap(np.zeros((1, 4, 3, 3))), onehot, np.array([3.0])), 3.0)
    with pytest.raises(ValueError):
        bev_project(FeatureMap(x), np.zeros((1, 1, 3, 1, 1)))


def test_upsample_concat_shapes():
    bevs = [np.ones((2, 8, 8)), np.ones((3, 4, 4)), np.ones((1, 2, 2))]
    ws = [np.ones((2, 2, 1, 1)), np.ones((3, 3, 2, 2)), np.ones((1, 1, 4, 4))]
    out = bev_upsample_concat(bevs, ws, [None] * 3)
    assert out.shape == (6, 8, 8)
    x = np.random.default_rng(1).normal(size=(2, 8, 8))
    np.testing.assert_array_equal(bev_upsample_concat([x], [np.eye(2).reshape(2, 2, 1, 1)], [None]), x)
    assert not bev_upsample_concat([np.zeros((2, 8, 8))], [ws[0]], [np.zeros(2)]).any()
    with pytest.raises(ValueError):
        bev_upsample_concat(bevs[:2], [ws[0], ws[0]], [None, None])


def test_transpose_conv_is_block_replication():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    out = ops.conv_transpose2d(x, np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(out[0, 0], np.kron(x[0, 0], np.ones((2, 2))))


# --- detector --------------------------------------------------------------

SMALL = DetectorConfig(
    grid=VoxelGridSpec(x_range=(0, 8), y_range=(-4, 4), z_range=(-1, 3), shape=(4, 8, 8)),
    backbone=BackboneConfig(grid_shape=(4, 8, 8), widths=(4, 6, 8), bev_channels=(3, 3, 3)),
)


def test_default_stage_shapes():
    assert BackboneConfig().stage_shapes() == [(32, 16, 128, 128), (64, 8, 64, 64), (128, 4, 32, 32)]


def test_config_rejects_bad_dims():
    with pytest.raises(ValueError):
        BackboneConfig(grid_shape=(6, 8, 8))
    with pytest.raises(ValueError):
        DetectorConfig(grid=VoxelGridSpec(shape=(4, 8, 8)))


@pytest.mark.parametrize("mode", ["snn", "ann"])
def test_forward_shapes_and_binarity(mode):
    m = Detector(SMALL, mode=mode, seed=1)
    for name in m.lif_block_names():
        m.buffers[name + ".bn.running_var"][:] = 0.05  # scale drive up so spikes appear
    x = np.random.default_rng(0).uniform(0, 1, size=(1, 3, 4, 8, 8)).astype(np.float32)
    out = m.forward(x)
    assert out["fm1"].shape == (1, 4, 4, 8, 8)
    assert out["fm2"].shape == (1, 6, 2, 4, 4)
    assert out["fm3"].shape == (1, 8, 1, 2, 2)
    assert out["bev"].shape == (1, 9, 8, 8)
    assert out["head"].shape == (1, HeadConfig().out_channels, 8, 8)
    if mode == "snn":
        assert all(ops.is_binary(out[f"fm{j}"]) for j in (1, 2, 3))


def test_mode_parity_shapes():
    x = np.zeros((1, 3, 4, 8, 8), np.float32)
    a = Detector(SMALL, "ann").forward(x)
    s = Detector(SMALL, "snn").forward(x)
    assert {k: v.shape for k, v in a.items()} == {k: v.shape for k, v in s.items()}


def test_ann_zero_grid_zero_features():
    m = Detector(SMALL, "ann")
    fms = backbone_forward(m, VoxelFeatureGrid(np.zeros((3, 4, 8, 8), np.float32)))
    assert all(not fm.values.any() for fm in fms)


def test_snn_ledger_splits_mac_and_ac():
    m = Detector(SMALL, "snn", seed=2)
    for name in m.lif_block_names():
        m.buffers[name + ".bn.running_var"][:] = 0.05
    x = np.random.default_rng(0).uniform(0, 1, size=(1, 3, 4, 8, 8)).astype(np.float32)
    led = OpLedger(mode="dense")
    m.forward(x, ledger=led)
    assert led.layers["stage1.block0"][1] == 0  # real voxel input: MACs
    assert led.layers["stage1.block1"][0] == 0  # spike input: ACs
    assert led.ac > 0
    ann = OpLedger()
    Detector(SMALL, "ann").forward(x, ledger=ann)
    assert ann.ac == 0


def test_event_path_matches_dense_path_in_detector():
    m = Detector(SMALL, "snn", seed=3)
    for name in m.lif_block_names():
        m.buffers[name + ".bn.running_var"][:] = 0.05
    x = np.random.default_rng(1).uniform(0, 1, size=(1, 3, 4, 8, 8)).astype(np.float32)
    from radarsnn.ops import Tape
    a = m.forward(x)["head"]
    b = m.forward(x, tape=Tape())["head"]  # taped forward uses dense convs throughout
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)
