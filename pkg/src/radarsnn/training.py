"""Single-step surrogate-gradient training with AdamW, and checkpoints.

Training always runs the spiking network for one time step from a resting
membrane. Spikes are thresholded in the forward pass and differentiated
through the tanh surrogate in the backward pass.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .backbone import Detector
from .boxes import Box3D
from .head import Targets, assign_targets, focal_loss, make_anchors, smooth_l1
from .points import RadarPointCloud, voxelize

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SPKR"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
LOSS_LOG_HEADER = ("epoch", "step", "loss_cls", "loss_reg", "loss_total")
LR_SCHEDULES = ("constant", "cosine")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.01
    w_cls: float = 1.0
    w_reg: float = 2.0
    lr_schedule: str = "constant"  # or "cosine": decays to zero over the run

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.lr < 0 or self.weight_decay < 0 or self.w_cls < 0 or self.w_reg < 0:
            raise ValueError("learning rate, weight decay and loss weights must be non-negative")


# --------------------------------------------------------------------------
# AdamW
# --------------------------------------------------------------------------


@dataclass
class AdamWState:
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def learning_rate(cfg: "TrainConfig", step: int, total_steps: int) -> float:
    """Learning rate for optimizer step ``step`` (0-based) of ``total_steps``."""
    if cfg.lr_schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / total_steps))
    return cfg.lr


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState) -> dict:
    """Update ``params`` in place with decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``
    """
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros(p.shape, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros(p.shape, dtype=np.float64))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g, dtype=np.float64)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p
        p -= (state.lr * update).astype(p.dtype)
    return params


# --------------------------------------------------------------------------
# Loss and gradients
# --------------------------------------------------------------------------


@dataclass
class Sample:
    """Voxelized frame with its precomputed anchor targets."""

    grid: np.ndarray  # (C, Z, Y, X)
    targets: Targets
    frame_id: str = ""


def prepare_samples(model: Detector, frames, anchors=None) -> list[Sample]:
    """Voxelize ``(cloud, gts)`` pairs and assign anchor targets once."""
    cfg = model.config
    if anchors is None:
        anchors = make_anchors(cfg.grid, cfg.head.anchors)
    out = []
    for cloud, gts in frames:
        grid = voxelize(cloud, cfg.grid).values
        out.append(Sample(grid, assign_targets(anchors, gts, cfg.head), cloud.frame_id))
    return out


@dataclass
class LossBreakdown:
    cls: float
    reg: float
    total: float


def head_rows(head_map, num_anchors: int, *, tape=None):
    """``(N, A*8, Y, X)`` head maps to ``(N*Y*X*A, 8)`` rows."""
    n, ch, y, x = head_map.shape
    r = ops.reshape(head_map, (n, num_anchors, ch // num_anchors, y, x), tape=tape)
    r = ops.transpose(r, (0, 3, 4, 1, 2), tape=tape)
    return ops.reshape(r, (n * y * x * num_anchors, ch // num_anchors), tape=tape)


def _first_nonfinite(tape: ops.Tape):
    for i, rec in enumerate(tape.records):
        if not np.all(np.isfinite(rec.output)):
            return f"{rec.kind} (op #{i})"
    return "loss"


def forward_backward(model: Detector, batch: list[Sample], cfg: TrainConfig = TrainConfig(), *,
                     reduction: str = "mean", soft: bool = False, training: bool = True):
    """Loss and parameter gradients for one batch at a single time step.

    ``reduction="sum"`` adds per-frame losses instead of pooling anchors,
    which makes each frame's contribution additive.
    """
    x = np.stack([s.grid for s in batch]).astype(model.dtype)
    tape = ops.Tape()
    out = model.forward(x, tape=tape, training=training, soft=soft)
    hc = model.config.head
    rows = head_rows(out["head"], hc.anchors.count, tape=tape)
    per_frame = len(batch[0].targets.labels)

    if reduction == "mean":
        groups = [(np.concatenate([s.targets.labels for s in batch]),
                   np.concatenate([s.targets.residuals for s in batch]), slice(None))]
    elif reduction == "sum":
        groups = [(s.targets.labels, s.targets.residuals, slice(i * per_frame, (i + 1) * per_frame))
                  for i, s in enumerate(batch)]
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    terms, cls_total, reg_total = [], 0.0, 0.0
    for labels, residuals, sl in groups:
        sub = ops.index(rows, sl, tape=tape) if sl != slice(None) else rows
        logits = ops.index(sub, (slice(None), 0), tape=tape)
        l_cls = focal_loss(logits, labels, hc.focal_alpha, hc.focal_gamma, tape=tape)
        pos = np.flatnonzero(labels == 1)
        reg = ops.index(sub, (pos, slice(1, None)), tape=tape)
        l_reg = smooth_l1(reg, residuals[pos], hc.smooth_l1_delta, tape=tape)
        terms.append(ops.scale(l_cls, cfg.w_cls, tape=tape))
        terms.append(ops.scale(l_reg, cfg.w_reg, tape=tape))
        cls_total += float(l_cls)
        reg_total += float(l_reg)
    loss = terms[0]
    for t in terms[1:]:
        loss = ops.add(loss, t, tape=tape)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss; first bad value from {_first_nonfinite(tape)}")

    grads_by_id = tape.backward(loss)
    grads = {}
    for name, p in model.params.items():
        g = grads_by_id.of(p)
        grads[name] = np.zeros_like(p) if g is None else g.astype(p.dtype)
    return LossBreakdown(cls_total, reg_total, float(loss)), grads


def loss_only(model: Detector, batch: list[Sample], cfg: TrainConfig = TrainConfig(), *,
              reduction="mean", soft=False, training=True) -> float:
    """Forward-only loss (used by finite-difference checks)."""
    # batch-norm running buffers are restored so repeated probes do not drift
    saved = {k: v.copy() for k, v in model.buffers.items()}
    try:
        x = np.stack([s.grid for s in batch]).astype(model.dtype)
        out = model.forward(x, training=training, soft=soft)
        hc = model.config.head
        rows = head_rows(out["head"], hc.anchors.count)
        per_frame = len(batch[0].targets.labels)
        if reduction == "mean":
            parts = [(np.concatenate([s.targets.labels for s in batch]),
                      np.concatenate([s.targets.residuals for s in batch]), rows)]
        else:
            parts = [(s.targets.labels, s.targets.residuals, rows[i * per_frame:(i + 1) * per_frame])
                     for i, s in enumerate(batch)]
        total = 0.0
        for labels, residuals, sub in parts:
            pos = np.flatnonzero(labels == 1)
            total += cfg.w_cls * float(focal_loss(sub[:, 0], labels, hc.focal_alpha, hc.focal_gamma))
            total += cfg.w_reg * float(smooth_l1(sub[pos, 1:], residuals[pos], hc.smooth_l1_delta))
        return total
    finally:
        for k, v in saved.items():
            model.buffers[k][...] = v


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class LogRow:
    epoch: int
    step: int
    loss_cls: float
    loss_reg: float
    loss_total: float


def train_loop(model: Detector, samples: list[Sample], cfg: TrainConfig = TrainConfig(),
               log_path=None, progress=None) -> list[LogRow]:
    """Optimize ``model.params`` in place; returns the per-step loss log."""
    if not samples:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rows: list[LogRow] = []
    step = 0
    total_steps = cfg.epochs * -(-len(samples) // cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            losses, grads = forward_backward(model, batch, cfg)
            state.lr = learning_rate(cfg, step, total_steps)
            adamw_step(model.params, grads, state)
            rows.append(LogRow(epoch, step, losses.cls, losses.reg, losses.total))
            step += 1
        if progress is not None:
            progress(epoch, rows)
        log.info("epoch %d loss %.5f", epoch, epoch_mean(rows, epoch))
    if log_path is not None:
        write_loss_log(log_path, rows)
    return rows


def epoch_mean(rows: list[LogRow], epoch: int) -> float:
    vals = [r.loss_total for r in rows if r.epoch == epoch]
    return float(np.mean(vals)) if vals else float("nan")


def write_loss_log(path, rows: list[LogRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_LOG_HEADER)
        for r in rows:
            w.writerow([r.epoch, r.step, f"{r.loss_cls:.8e}", f"{r.loss_reg:.8e}", f"{r.loss_total:.8e}"])


def labeled_pairs(frames) -> list[tuple[RadarPointCloud, list[Box3D]]]:
    return [(f.cloud, f.gts) for f in frames]


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(tensors: dict[str, np.ndarray], path) -> None:
    """Binary tensor archive: ``SPKR | version | count | tensors...``."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, count = struct.unpack_from("<4sII", data, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + n].decode("utf-8")
            off += n
            code, rank = struct.unpack_from("<BB", data, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            dt = _DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + size > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            out[name] = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=off).reshape(dims).copy()
            off += size
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return out


def model_state(model: Detector) -> dict[str, np.ndarray]:
    return model.named_arrays()


def load_into(model: Detector, tensors: dict[str, np.ndarray]) -> Detector:
    """Copy checkpoint tensors into ``model``, checking names and shapes."""
    targets = model.named_arrays()
    missing = sorted(set(targets) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
    for name, arr in targets.items():
        src = tensors[name]
        if src.shape != arr.shape:
            raise CheckpointError(f"{name}: checkpoint shape {src.shape} != model shape {arr.shape}")
        arr[...] = src
    return model
