"""Single-class anchor head: target assignment, losses, decoding and NMS.

Each BEV cell carries one anchor per configured yaw. The head map has
``A * 8`` channels; channel ``a * 8`` is the logit of anchor ``a`` and
channels ``a * 8 + 1 .. a * 8 + 7`` its box residuals
``(dx, dy, dz, dl, dw, dh, dyaw)``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .boxes import Box3D, normalize_angle, rotated_iou_bev
from .energy import OpLedger
from .points import VoxelGridSpec

REG_DIM = 7
DETECTION_HEADER = ("frame_id", "score", "cx", "cy", "cz", "l", "w", "h", "yaw")


@dataclass(frozen=True)
class AnchorSpec:
    size: tuple[float, float, float] = (4.5, 1.9, 1.6)
    yaws: tuple[float, ...] = (0.0, math.pi / 2)
    z_center: float = 0.8
    stride: int = 1

    @property
    def count(self) -> int:
        return len(self.yaws)


@dataclass(frozen=True)
class HeadConfig:
    anchors: AnchorSpec = AnchorSpec()
    kernel: int = 3
    pos_iou: float = 0.5
    neg_iou: float = 0.35
    force_match: bool = True
    yaw_period: float = math.pi
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_delta: float = 1.0
    score_threshold: float = 0.3
    nms_iou: float = 0.1

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("head kernel must be odd")
        if not 0 <= self.neg_iou <= self.pos_iou <= 1:
            raise ValueError("IoU gates must satisfy 0 <= neg <= pos <= 1")
        if not (math.isclose(self.yaw_period, math.pi) or math.isclose(self.yaw_period, 2 * math.pi)):
            raise ValueError("yaw_period must be pi or 2*pi")

    @property
    def out_channels(self) -> int:
        return self.anchors.count * (1 + REG_DIM)


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    frame_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def make_anchors(grid: VoxelGridSpec, spec: AnchorSpec = AnchorSpec()) -> np.ndarray:
    """Anchor boxes as an ``(Y * X * A, 7)`` array in head-map order."""
    xs, ys = grid.cell_centers_bev(spec.stride)
    l, w, h = spec.size
    yy, xx, aa = np.meshgrid(ys, xs, np.asarray(spec.yaws, dtype=np.float64), indexing="ij")
    n = yy.size
    out = np.empty((n, 7))
    out[:, 0] = xx.ravel()
    out[:, 1] = yy.ravel()
    out[:, 2] = spec.z_center
    out[:, 3], out[:, 4], out[:, 5] = l, w, h
    out[:, 6] = aa.ravel()
    return out


def head_forward(concat_bev, weight, bias, *, ledger: OpLedger | None = None, tape=None, layer="head"):
    """Detection head convolution on ``(N, C, Y, X)`` BEV features."""
    n, c, y, x = concat_bev.shape
    k = weight.shape[-1]
    vol = ops.reshape(concat_bev, (n, c, 1, y, x), tape=tape)
    out = ops.conv3d(vol, weight, bias, stride=1, padding=(0, k // 2, k // 2), tape=tape, ledger=ledger, layer=layer)
    return ops.reshape(out, (n, weight.shape[0], y, x), tape=tape)


def flatten_head(raw, num_anchors: int):
    """``(A*8, Y, X)`` map to ``(Y*X*A, 8)`` rows in anchor order."""
    ch, y, x = raw.shape
    return raw.reshape(num_anchors, 1 + REG_DIM, y, x).transpose(2, 3, 0, 1).reshape(-1, 1 + REG_DIM)


def unflatten_head(rows, y: int, x: int, num_anchors: int):
    return rows.reshape(y, x, num_anchors, 1 + REG_DIM).transpose(2, 3, 0, 1).reshape(-1, y, x)


# --------------------------------------------------------------------------
# Residual coding
# --------------------------------------------------------------------------


def _wrap_yaw(d, period):
    half = period / 2
    w = np.mod(np.asarray(d, dtype=np.float64) + half, period) - half
    return np.where(w == -half, half, w)


def encode(gt: np.ndarray, anchors: np.ndarray, yaw_period: float = 2 * math.pi) -> np.ndarray:
    """Residuals that turn ``anchors`` into ``gt`` (both ``(M, 7)``)."""
    gt, anchors = np.atleast_2d(gt), np.atleast_2d(anchors)
    d_a = np.hypot(anchors[:, 3], anchors[:, 4])
    r = np.empty(np.broadcast_shapes(gt.shape, anchors.shape))
    r[:, 0] = (gt[:, 0] - anchors[:, 0]) / d_a
    r[:, 1] = (gt[:, 1] - anchors[:, 1]) / d_a
    r[:, 2] = (gt[:, 2] - anchors[:, 2]) / anchors[:, 5]
    r[:, 3:6] = np.log(gt[:, 3:6] / anchors[:, 3:6])
    r[:, 6] = _wrap_yaw(gt[:, 6] - anchors[:, 6], yaw_period)
    return r


def decode_boxes(residuals: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    residuals, anchors = np.atleast_2d(residuals), np.atleast_2d(anchors)
    d_a = np.hypot(anchors[:, 3], anchors[:, 4])
    b = np.empty_like(anchors, dtype=np.float64)
    b[:, 0] = anchors[:, 0] + residuals[:, 0] * d_a
    b[:, 1] = anchors[:, 1] + residuals[:, 1] * d_a
    b[:, 2] = anchors[:, 2] + residuals[:, 2] * anchors[:, 5]
    b[:, 3:6] = anchors[:, 3:6] * np.exp(np.clip(residuals[:, 3:6], -10, 10))
    b[:, 6] = normalize_angle(anchors[:, 6] + residuals[:, 6])
    return b


# --------------------------------------------------------------------------
# Target assignment
# --------------------------------------------------------------------------


@dataclass
class Targets:
    labels: np.ndarray  # int8 per anchor: 1 positive, 0 negative, -1 ignore
    residuals: np.ndarray  # (M, 7), meaningful where labels == 1
    matched: np.ndarray  # gt index per anchor, -1 if none

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)


def anchor_gt_iou(anchors: np.ndarray, gts: list[Box3D]) -> np.ndarray:
    """BEV IoU matrix ``(M, G)``, evaluated only for overlapping pairs."""
    m = len(anchors)
    iou = np.zeros((m, len(gts)))
    if m == 0:
        return iou
    r_a = 0.5 * np.hypot(anchors[:, 3], anchors[:, 4])
    for j, g in enumerate(gts):
        reach = r_a + 0.5 * math.hypot(g.l, g.w)
        near = np.flatnonzero(np.hypot(anchors[:, 0] - g.cx, anchors[:, 1] - g.cy) < reach)
        for i in near:
            iou[i, j] = rotated_iou_bev(Box3D.from_array(anchors[i]), g)
    return iou


def assign_targets(anchors: np.ndarray, gts: list[Box3D], cfg: HeadConfig = HeadConfig()) -> Targets:
    """Label anchors by BEV IoU with ground truth and compute residuals.

    Positive at IoU >= ``pos_iou``, negative below ``neg_iou``, ignored in
    between. With ``force_match`` every ground truth also claims its single
    best-overlapping anchor so that rotated boxes are never left unmatched.
    """
    m = len(anchors)
    labels = np.zeros(m, dtype=np.int8)
    residuals = np.zeros((m, REG_DIM))
    matched = np.full(m, -1, dtype=np.int64)
    if not gts:
        return Targets(labels, residuals, matched)
    iou = anchor_gt_iou(anchors, gts)
    best_gt = iou.argmax(axis=1)
    best = iou[np.arange(m), best_gt]
    labels[best >= cfg.neg_iou] = -1
    pos = best >= cfg.pos_iou
    if cfg.force_match:
        for j in range(len(gts)):
            i = int(iou[:, j].argmax())
            if iou[i, j] > 0:
                pos[i] = True
                best_gt[i] = j
    labels[pos] = 1
    matched[pos] = best_gt[pos]
    gt_arr = np.array([g.to_array() for g in gts])
    idx = np.flatnonzero(pos)
    residuals[idx] = encode(gt_arr[best_gt[idx]], anchors[idx], cfg.yaw_period)
    return Targets(labels, residuals, matched)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def focal_loss(logits, labels, alpha=0.25, gamma=2.0, *, tape=None):
    """Sigmoid focal loss averaged over non-ignored anchors.

    ``labels`` holds 1 (positive), 0 (negative) or -1 (ignored).
    """
    x = np.asarray(logits, dtype=np.float64)
    keep = labels >= 0
    count = int(keep.sum())
    if count == 0:
        warnings.warn("focal loss: every anchor is ignored", RuntimeWarning, stacklevel=2)
        out = np.zeros((), dtype=np.asarray(logits).dtype)
        if tape is not None:
            tape.record("focal_loss", (logits,), out, lambda g: (np.zeros_like(logits),))
        return out
    t = labels == 1
    p = 1.0 / (1.0 + np.exp(-x))
    q = 1.0 - p
    log_p, log_q = _log_sigmoid(x), _log_sigmoid(-x)
    per = np.where(t, -alpha * q**gamma * log_p, -(1 - alpha) * p**gamma * log_q)
    per = np.where(keep, per, 0.0)
    out = np.asarray(per.sum() / count, dtype=np.asarray(logits).dtype)

    if tape is not None:
        def backward(g):
            d_pos = alpha * q**gamma * (gamma * p * log_p - q)
            d_neg = (1 - alpha) * p**gamma * (p - gamma * q * log_q)
            d = np.where(t, d_pos, d_neg) * keep / count
            return ((float(g) * d).astype(np.asarray(logits).dtype),)

        tape.record("focal_loss", (logits,), out, backward)
    return out


def smooth_l1(pred, target, delta=1.0, *, tape=None):
    """Huber-style loss averaged over every element of ``pred``."""
    pred64 = np.asarray(pred, dtype=np.float64)
    d = pred64 - np.asarray(target, dtype=np.float64)
    ad = np.abs(d)
    if d.size == 0:
        out = np.zeros((), dtype=np.asarray(pred).dtype)
        if tape is not None:
            tape.record("smooth_l1", (pred,), out, lambda g: (np.zeros_like(pred),))
        return out
    per = np.where(ad < delta, 0.5 * d * d / delta, ad - 0.5 * delta)
    out = np.asarray(per.mean(), dtype=np.asarray(pred).dtype)
    if tape is not None:
        def backward(g):
            dd = np.where(ad < delta, d / delta, np.sign(d)) / d.size
            return ((float(g) * dd).astype(np.asarray(pred).dtype),)

        tape.record("smooth_l1", (pred,), out, backward)
    return out


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------


def decode(rows: np.ndarray, anchors: np.ndarray, score_threshold=0.3, frame_id="") -> list[Detection]:
    """Detections for anchors whose sigmoid score reaches the threshold."""
    rows = np.asarray(rows, dtype=np.float64)
    scores = 1.0 / (1.0 + np.exp(-rows[:, 0]))
    keep = np.flatnonzero(scores >= score_threshold)
    if len(keep) == 0:
        return []
    boxes = decode_boxes(rows[keep, 1:], anchors[keep])
    return [Detection(Box3D.from_array(b), float(s), frame_id) for b, s in zip(boxes, scores[keep])]


def nms_bev(dets: list[Detection], iou_threshold=0.1) -> list[Detection]:
    """Greedy suppression by BEV IoU, highest score first (ties: input order)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(rotated_iou_bev(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def write_detections(path, dets: list[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_HEADER)
        for d in dets:
            b = d.box
            w.writerow([d.frame_id] + [f"{v:.6f}" for v in (d.score, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw)])


def read_detections(path) -> list[Detection]:
    dets = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DETECTION_HEADER:
            raise ValueError(f"{path}: expected header {','.join(DETECTION_HEADER)}")
        for row in reader:
            box = Box3D(*(float(row[k]) for k in DETECTION_HEADER[2:]))
            dets.append(Detection(box, float(row["score"]), row["frame_id"]))
    return dets
