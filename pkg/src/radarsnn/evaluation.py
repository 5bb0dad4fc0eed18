"""Detection matching and 40-point interpolated average precision."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .boxes import Box3D, iou_3d, rotated_iou_bev
from .head import Detection

__all__ = [
    "PRCurve", "APResult", "rotated_iou_bev", "iou_3d",
    "match_and_score", "average_precision", "evaluate", "eval_report",
]

RECALL_POINTS = 40


@dataclass
class PRCurve:
    scores: np.ndarray  # non-increasing
    is_tp: np.ndarray  # bool, aligned with scores
    num_gt: int

    @property
    def tp(self) -> int:
        return int(self.is_tp.sum())

    @property
    def fp(self) -> int:
        return int((~self.is_tp).sum())

    @property
    def fn(self) -> int:
        return self.num_gt - self.tp


@dataclass
class APResult:
    ap_bev: float
    ap_3d: float
    tp: int
    fp: int
    fn: int


def match_and_score(dets: list[Detection], gts: dict[str, list[Box3D]],
                    iou_fn: Callable[[Box3D, Box3D], float] = rotated_iou_bev,
                    threshold: float = 0.3) -> PRCurve:
    """Greedy score-ordered matching; each ground truth is used at most once.

    A detection is a true positive when its best still-unmatched ground
    truth in the same frame overlaps by at least ``threshold``.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used = {fid: np.zeros(len(boxes), dtype=bool) for fid, boxes in gts.items()}
    scores = np.empty(len(order))
    is_tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        scores[rank] = d.score
        boxes = gts.get(d.frame_id, [])
        best, best_j = threshold, -1
        for j, g in enumerate(boxes):
            if used[d.frame_id][j]:
                continue
            iou = iou_fn(d.box, g)
            if iou >= best:
                best, best_j = iou, j
        if best_j >= 0:
            used[d.frame_id][best_j] = True
            is_tp[rank] = True
    num_gt = sum(len(b) for b in gts.values())
    return PRCurve(scores, is_tp, num_gt)


def average_precision(curve: PRCurve, points: int = RECALL_POINTS) -> float:
    """Mean over recall levels ``k/points`` of the best precision reaching them."""
    if curve.num_gt <= 0:
        raise ValueError("average precision undefined without ground truth")
    if len(curve.is_tp) == 0:
        return 0.0
    tp = np.cumsum(curve.is_tp)
    precision = tp / np.arange(1, len(tp) + 1)
    recall = tp / curve.num_gt
    # best precision at recall >= r, scanning from the tail
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for k in range(1, points + 1):
        idx = np.searchsorted(recall, k / points - 1e-12, side="left")
        if idx < len(recall):
            total += envelope[idx]
    return float(total / points)


def evaluate(dets: list[Detection], gts: dict[str, list[Box3D]], threshold: float = 0.3) -> APResult:
    bev = match_and_score(dets, gts, rotated_iou_bev, threshold)
    vol = match_and_score(dets, gts, iou_3d, threshold)
    return APResult(average_precision(bev), average_precision(vol), bev.tp, bev.fp, bev.fn)


def eval_report(result: APResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    w.writerow(["ap_bev", f"{result.ap_bev:.6f}"])
    w.writerow(["ap_3d", f"{result.ap_3d:.6f}"])
    w.writerow(["tp", result.tp])
    w.writerow(["fp", result.fp])
    w.writerow(["fn", result.fn])
    return buf.getvalue()
