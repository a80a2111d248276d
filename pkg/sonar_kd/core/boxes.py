"""Box types and geometry helpers.

Detections and labels are center-format ``(cx, cy, w, h)`` in pixels; overlap is computed on
top-left ``(x, y, w, h)`` boxes.
"""

from dataclasses import dataclass
from typing import Tuple

XYWH = Tuple[float, float, float, float]


@dataclass(frozen=True)
class DetBox:
    """One detection in input-image pixel coordinates."""

    class_id: int
    score: float
    cx: float
    cy: float
    w: float
    h: float

    def to_xywh(self) -> XYWH:
        return center_to_xywh(self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class GTBox:
    """A ground-truth label in pixel coordinates."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def to_xywh(self) -> XYWH:
        return center_to_xywh(self.cx, self.cy, self.w, self.h)


def center_to_xywh(cx: float, cy: float, w: float, h: float) -> XYWH:
    return (cx - w / 2.0, cy - h / 2.0, w, h)


def xywh_to_center(x: float, y: float, w: float, h: float) -> XYWH:
    return (x + w / 2.0, y + h / 2.0, w, h)


def iou_xywh(a: XYWH, b: XYWH) -> float:
    """Intersection over union of two top-left boxes; 0 when the union has no area."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = max(aw, 0.0) * max(ah, 0.0) + max(bw, 0.0) * max(bh, 0.0) - inter
    if union <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def box_in_bounds(box: GTBox, width: float, height: float, tol: float = 1e-6) -> bool:
    x, y, w, h = box.to_xywh()
    return w >= 0 and h >= 0 and x >= -tol and y >= -tol and x + w <= width + tol and y + h <= height + tol
