"""Frame-level inference, with or without the density cascade."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Detector
from .energy import OpLedger
from .head import Detection, decode, flatten_head, make_anchors, nms_bev
from .points import RadarPointCloud, bti_cascade, voxelize


@dataclass
class FrameResult:
    detections: list[Detection]
    ledger: OpLedger
    step_sizes: list[int] = field(default_factory=list)
    head: np.ndarray | None = None


class InferenceEngine:
    """Runs a trained :class:`Detector` over point clouds.

    In ``snn`` mode with ``steps > 1`` each frame is processed as the
    cascade of ever sparser clouds; membrane potentials carry over between
    steps (unless ``reset_between_steps``) and are cleared between frames.
    Detections come from the last step only, while the ledger bills every
    step.
    """

    def __init__(self, model: Detector, r: float | None = None, steps: int = 1,
                 reset_between_steps: bool = False, count_mode: str = "dense"):
        if model.mode == "ann" and (r is not None or steps != 1):
            raise ValueError("the density cascade needs spiking mode; ann mode runs a single step")
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if steps > 1 and r is None:
            raise ValueError("multi-step inference needs a density ratio r")
        self.model = model
        self.r = r
        self.steps = steps
        self.reset_between_steps = reset_between_steps
        self.count_mode = count_mode
        cfg = model.config
        self.anchors = make_anchors(cfg.grid, cfg.head.anchors)

    def run_frame(self, cloud: RadarPointCloud) -> FrameResult:
        cfg = self.model.config
        ledger = OpLedger(frame_id=cloud.frame_id, mode=self.count_mode)
        clouds = bti_cascade(cloud, self.r, self.steps) if (self.steps > 1 and len(cloud)) else [cloud]
        states: dict | None = {} if self.model.mode == "snn" else None
        out = None
        for c in clouds:
            grid = voxelize(c, cfg.grid).values
            out = self.model.forward(grid[None], states=states, ledger=ledger)
            if self.reset_between_steps and states is not None:
                states = {}
        rows = flatten_head(out["head"][0], cfg.head.anchors.count)
        dets = decode(rows, self.anchors, cfg.head.score_threshold, cloud.frame_id)
        dets = nms_bev(dets, cfg.head.nms_iou)
        return FrameResult(dets, ledger, [len(c) for c in clouds], out["head"][0])

    def run(self, clouds) -> tuple[list[Detection], OpLedger, int]:
        """All detections in input order, summed ledger and frame count."""
        total = OpLedger(mode=self.count_mode)
        dets: list[Detection] = []
        n = 0
        for cloud in clouds:
            res = self.run_frame(cloud)
            dets.extend(res.detections)
            total.merge(res.ledger)
            n += 1
        return dets, total, n
