"""Three-stage 3D convolutional backbone, BEV neck and the full detector.

In ``snn`` mode every conv block ends in a LIF layer and emits binary
spike volumes; blocks fed by spikes run through the event-driven
convolution and are billed as accumulations. In ``ann`` mode the same
blocks end in ReLU and everything is billed as MACs. The BEV neck and
the head are real-valued in both modes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .energy import OpLedger
from .head import HeadConfig, head_forward
from .lif import LIFParams, MembraneState, lif_step
from .points import VoxelFeatureGrid, VoxelGridSpec

MODES = ("snn", "ann")


class FeatureMap:
    """Rank-4 ``(C, Z, Y, X)`` volume, flagged binary when it holds spikes."""

    def __init__(self, values, binary: bool = False):
        values = np.asarray(values)
        if values.ndim != 4:
            raise ValueError(f"feature map must be rank 4, got shape {values.shape}")
        if binary and not ops.is_binary(values):
            raise ValueError("binary feature map holds values outside {0, 1}")
        self.values = values
        self.binary = binary

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"FeatureMap(shape={self.shape}, binary={self.binary})"


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype),
        )


@dataclass
class ConvBlockSpec:
    """Conv weights, batch norm and activation of one block."""

    weight: np.ndarray  # (Cout, Cin, k, k, k)
    bn: BatchNormParams | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    activation: str = "lif"  # lif | relu | none
    name: str = "block"

    def __post_init__(self):
        k = self.weight.shape[2:]
        if any(s % 2 == 0 for s in k):
            raise ValueError(f"{self.name}: kernel must be odd-sized, got {k}")
        if self.stride not in (1, 2):
            raise ValueError(f"{self.name}: stride must be 1 or 2")
        if self.activation not in ("lif", "relu", "none"):
            raise ValueError(f"{self.name}: unknown activation {self.activation!r}")

    @property
    def padding(self):
        return tuple(s // 2 for s in self.weight.shape[2:])

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    grid_shape: tuple[int, int, int] = (16, 128, 128)
    widths: tuple[int, int, int] = (32, 64, 128)
    blocks_per_stage: int = 2
    kernel: int = 3
    bev_channels: tuple[int, int, int] = (64, 64, 64)

    def __post_init__(self):
        if len(self.widths) != 3 or len(self.bev_channels) != 3:
            raise ValueError("backbone has exactly three stages")
        if self.blocks_per_stage < 1:
            raise ValueError("each stage needs at least one block")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")
        for d in self.grid_shape:
            if d % 4 != 0:
                raise ValueError(f"grid dims must be divisible by 4 for two stride-2 stages, got {self.grid_shape}")

    def stage_shapes(self) -> list[tuple[int, int, int, int]]:
        z, y, x = self.grid_shape
        return [(c, z >> j, y >> j, x >> j) for j, c in enumerate(self.widths)]


@dataclass(frozen=True)
class DetectorConfig:
    grid: VoxelGridSpec = VoxelGridSpec()
    backbone: BackboneConfig = BackboneConfig()
    head: HeadConfig = HeadConfig()
    lif: LIFParams = LIFParams()

    def __post_init__(self):
        if tuple(self.grid.shape) != tuple(self.backbone.grid_shape):
            raise ValueError(f"voxel grid {self.grid.shape} does not match backbone input {self.backbone.grid_shape}")
        if self.grid.channels != self.backbone.in_channels:
            raise ValueError("voxel encoding channels differ from backbone input channels")


# --------------------------------------------------------------------------
# Block-level operations on single frames
# --------------------------------------------------------------------------


def conv3d(fm: FeatureMap, spec: ConvBlockSpec, ledger: OpLedger | None = None) -> np.ndarray:
    """Dense convolution of one frame, billed as MACs."""
    _check_in(fm, spec)
    out = ops.conv3d(fm.values[None], spec.weight, spec.bias, spec.stride, spec.padding, ledger=ledger, layer=spec.name)
    return out[0]


def event_driven_conv3d(spikes: FeatureMap, spec: ConvBlockSpec, ledger: OpLedger | None = None) -> np.ndarray:
    """Spike-gated convolution of one frame, billed as ACs."""
    if not spikes.binary:
        raise ValueError("event-driven path requires spikes")
    _check_in(spikes, spec)
    out = ops.event_conv3d(spikes.values[None], spec.weight, spec.bias, spec.stride, spec.padding,
                           ledger=ledger, layer=spec.name)
    return out[0]


def _check_in(fm, spec):
    if fm.shape[0] != spec.in_channels:
        raise ValueError(f"{spec.name}: expected {spec.in_channels} input channels, got {fm.shape[0]}")


def conv_block_forward(fm: FeatureMap, spec: ConvBlockSpec, state: MembraneState | None = None,
                       ledger: OpLedger | None = None, lif: LIFParams = LIFParams()):
    """conv -> batch norm (running stats) -> activation for one frame.

    LIF blocks need a membrane state, which is advanced in place of the
    returned ``(FeatureMap, MembraneState)`` pair; other activations return
    ``(FeatureMap, None)``.
    """
    if spec.activation == "lif" and state is None:
        raise ValueError(f"{spec.name}: LIF block needs a membrane state")
    pre = event_driven_conv3d(fm, spec, ledger) if fm.binary else conv3d(fm, spec, ledger)
    if spec.bn is not None:
        bn = spec.bn
        pre = ops.batchnorm(pre[None], bn.gamma, bn.beta, bn.running_mean, bn.running_var, eps=bn.eps)[0]
    if spec.activation == "lif":
        _, state = lif_step(state, pre, lif)
        out = (state.potentials >= lif.v_th).astype(pre.dtype)
        return FeatureMap(out, binary=True), state
    if spec.activation == "relu":
        return FeatureMap(np.maximum(pre, 0), binary=False), None
    return FeatureMap(pre, binary=False), None


def bev_project(fm: FeatureMap, weight: np.ndarray, bias: np.ndarray | None = None,
                ledger: OpLedger | None = None, layer: str = "bev") -> np.ndarray:
    """Collapse the vertical axis with a kernel spanning all of Z.

    ``weight`` is ``(C', C, Z, 1, 1)``; returns ``(C', Y, X)``.
    """
    if weight.shape[2] != fm.shape[1]:
        raise ValueError(f"{layer}: kernel depth {weight.shape[2]} != feature map Z {fm.shape[1]}")
    if fm.binary:
        out = ops.event_conv3d(fm.values[None], weight, bias, 1, 0, ledger=ledger, layer=layer)
    else:
        out = ops.conv3d(fm.values[None], weight, bias, 1, 0, ledger=ledger, layer=layer)
    return out[0, :, 0]


def bev_upsample_concat(bevs, weights, biases, ledger: OpLedger | None = None) -> np.ndarray:
    """Upsample each BEV map to the stage-1 size and stack along channels."""
    ups = []
    for j, (bev, w, b) in enumerate(zip(bevs, weights, biases), start=1):
        ups.append(ops.conv_transpose2d(bev[None], w, b, ledger=ledger, layer=f"up{j}")[0])
    target = ups[0].shape[1:]
    for j, u in enumerate(ups, start=1):
        if u.shape[1:] != target:
            raise ValueError(f"up{j}: upsampled shape {u.shape[1:]} != {target}")
    return np.concatenate(ups, axis=0)


# --------------------------------------------------------------------------
# Detector
# --------------------------------------------------------------------------


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Detector:
    """Voxel grid to head map; parameters live in ``params``/``buffers``."""

    def __init__(self, config: DetectorConfig = DetectorConfig(), mode: str = "snn", seed: int = 0,
                 dtype=np.float32, prior: float = 0.01):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.config = config
        self.mode = mode
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        bb = config.backbone
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.blocks: list[list[ConvBlockSpec]] = []

        k = bb.kernel
        cin = bb.in_channels
        for j, width in enumerate(bb.widths, start=1):
            stage = []
            for i in range(bb.blocks_per_stage):
                stride = 2 if (j > 1 and i == bb.blocks_per_stage - 1) else 1
                name = f"stage{j}.block{i}"
                w = _kaiming_uniform(rng, (width, cin, k, k, k), cin * k**3, dtype)
                bn = BatchNormParams.identity(width, dtype)
                self.params[f"{name}.weight"] = w
                self.params[f"{name}.bn.gamma"] = bn.gamma
                self.params[f"{name}.bn.beta"] = bn.beta
                self.buffers[f"{name}.bn.running_mean"] = bn.running_mean
                self.buffers[f"{name}.bn.running_var"] = bn.running_var
                stage.append(ConvBlockSpec(w, bn, None, stride, "lif" if mode == "snn" else "relu", name))
                cin = width
            self.blocks.append(stage)

        for j, (c, z, _, _) in enumerate(bb.stage_shapes(), start=1):
            cb = bb.bev_channels[j - 1]
            self.params[f"bev{j}.weight"] = _kaiming_uniform(rng, (cb, c, z, 1, 1), c * z, dtype)
            self.params[f"bev{j}.bias"] = np.zeros(cb, dtype)
            f = 2 ** (j - 1)
            self.params[f"up{j}.weight"] = _kaiming_uniform(rng, (cb, cb, f, f), cb, dtype)
            self.params[f"up{j}.bias"] = np.zeros(cb, dtype)

        hc = config.head
        c_cat = sum(bb.bev_channels)
        hk = hc.kernel
        self.params["head.weight"] = (
            rng.normal(0.0, 0.01, size=(hc.out_channels, c_cat, 1, hk, hk)).astype(dtype)
        )
        hb = np.zeros(hc.out_channels, dtype)
        hb[:: 1 + 7] = -math.log((1 - prior) / prior)
        self.params["head.bias"] = hb

    # ------------------------------------------------------------------

    def forward(self, x, *, states: dict | None = None, ledger: OpLedger | None = None, tape=None,
                training: bool = False, soft: bool = False) -> dict[str, np.ndarray]:
        """Run the network on a ``(N, C, Z, Y, X)`` batch.

        ``states`` maps LIF block names to membrane states and is updated;
        when omitted the LIF layers start from rest (single-step
        inference and training). ``soft`` swaps the spike for its
        smooth surrogate, for gradient checks only.
        """
        outputs = self.forward_backbone(x, states=states, ledger=ledger, tape=tape, training=training, soft=soft)
        spikes = self.mode == "snn" and not soft and tape is None
        ups = []
        for j in range(1, 4):
            fm = outputs[f"fm{j}"]
            w, b = self.params[f"bev{j}.weight"], self.params[f"bev{j}.bias"]
            if spikes:
                bev = ops.event_conv3d(fm, w, b, 1, 0, ledger=ledger, layer=f"bev{j}", check=False)
            else:
                bev = ops.conv3d(fm, w, b, 1, 0, tape=tape, ledger=ledger, layer=f"bev{j}")
            n, c, _, yj, xj = bev.shape
            bev = ops.reshape(bev, (n, c, yj, xj), tape=tape)
            ups.append(ops.conv_transpose2d(bev, self.params[f"up{j}.weight"], self.params[f"up{j}.bias"],
                                            tape=tape, ledger=ledger, layer=f"up{j}"))
        cat = ops.concat(ups, axis=1, tape=tape)
        outputs["bev"] = cat
        outputs["head"] = head_forward(cat, self.params["head.weight"], self.params["head.bias"],
                                       ledger=ledger, tape=tape)
        return outputs

    def forward_backbone(self, x, *, states=None, ledger=None, tape=None, training=False, soft=False):
        lif = self.config.lif
        h = np.asarray(x, dtype=self.dtype)
        outputs = {}
        binary = False
        for j, stage in enumerate(self.blocks, start=1):
            for spec in stage:
                h, binary = self._block(h, binary, spec, states, ledger, tape, training, soft, lif)
            outputs[f"fm{j}"] = h
        return outputs

    def _block(self, h, binary, spec, states, ledger, tape, training, soft, lif):
        use_event = binary and tape is None and not soft
        if use_event:
            pre = ops.event_conv3d(h, spec.weight, None, spec.stride, spec.padding, ledger=ledger,
                                   layer=spec.name, check=False)
        else:
            pre = ops.conv3d(h, spec.weight, None, spec.stride, spec.padding, tape=tape, ledger=ledger,
                             layer=spec.name)
        bn = spec.bn
        pre = ops.batchnorm(pre, bn.gamma, bn.beta, bn.running_mean, bn.running_var,
                            training=training, momentum=bn.momentum, eps=bn.eps, tape=tape)
        if spec.activation == "relu":
            return ops.relu(pre, tape=tape), False
        if soft:
            return ops.soft_spike(pre, lif, tape=tape), False
        if states is None:
            # resting membrane: the integrated potential equals the drive
            return ops.spike(pre, lif, tape=tape), True
        state = states.get(spec.name)
        if state is None:
            state = MembraneState.fresh(pre.shape, lif, pre.dtype)
        _, state = lif_step(state, pre, lif)
        states[spec.name] = state
        return (state.potentials >= lif.v_th).astype(pre.dtype), True

    def lif_block_names(self) -> list[str]:
        return [s.name for stage in self.blocks for s in stage if s.activation == "lif"]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update(self.buffers)
        return out


def backbone_forward(model: Detector, grid: VoxelFeatureGrid, states: dict | None = None,
                     ledger: OpLedger | None = None):
    """``(FM1, FM2, FM3)`` of one voxel grid as :class:`FeatureMap` objects."""
    expected = (model.config.backbone.in_channels, *model.config.backbone.grid_shape)
    if grid.values.shape != expected:
        raise ValueError(f"grid shape {grid.values.shape} != expected {expected}")
    out = model.forward_backbone(grid.values[None], states=states, ledger=ledger)
    binary = model.mode == "snn"
    return tuple(FeatureMap(out[f"fm{j}"][0], binary) for j in (1, 2, 3))
