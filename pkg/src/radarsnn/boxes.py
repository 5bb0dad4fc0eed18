"""Oriented 3D boxes and rotated-rectangle overlap geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def normalize_angle(a):
    """Wrap to ``(-pi, pi]``."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.l >= 0 and self.w >= 0 and self.h >= 0):
            raise ValueError(f"box dimensions must be non-negative, got {(self.l, self.w, self.h)}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*(float(v) for v in a[:7]))

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @property
    def z_min(self) -> float:
        return self.cz - self.h / 2

    @property
    def z_max(self) -> float:
        return self.cz + self.h / 2

    def corners_bev(self) -> np.ndarray:
        """Counter-clockwise footprint corners, shape ``(4, 2)``."""
        return rect_corners(self.cx, self.cy, self.l, self.w, self.yaw)


def rect_corners(cx, cy, l, w, yaw) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = l / 2, w / 2
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    pts = [(cx + c * x - s * y, cy + s * x + c * y) for x, y in local]
    return np.array(pts)


def polygon_area(poly) -> float:
    """Signed shoelace area (positive when counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject, clip) -> list:
    """Sutherland-Hodgman clip of ``subject`` by convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    m = len(clip)
    for i in range(m):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % m]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection(a: Box3D, b: Box3D) -> float:
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
        return 0.0
    poly = clip_convex(a.corners_bev(), b.corners_bev())
    return max(polygon_area(poly), 0.0)


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """Footprint IoU of two yaw-rotated rectangles."""
    area_a, area_b = a.l * a.w, b.l * b.w
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = bev_intersection(a, b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two boxes that rotate about the vertical axis only."""
    dz = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if dz <= 0:
        return 0.0
    inter = bev_intersection(a, b) * dz
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou_matrix(boxes_a, boxes_b, fn=rotated_iou_bev) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = fn(a, b)
    return out
