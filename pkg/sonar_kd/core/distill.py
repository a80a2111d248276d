"""Distillation losses, the ground-truth (hard) loss and their combination.

Soft losses compare student logits ``S`` with teacher logits ``T`` scale by scale. In the default
``sum`` normalization every per-scale term is an elementwise sum and the total over the three
scales is divided once by ``batch_size * 3``. The ``mean`` normalization replaces the sums by
per-element means and averages the three scales instead.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from sonar_kd.core import ops
from sonar_kd.core.autodiff import Tensor
from sonar_kd.core.boxes import GTBox
from sonar_kd.core.detector import FpnLogits, ScaleLogits
from sonar_kd.core.functional import bce, kl_div_log_input, log_softmax, softmax
from sonar_kd.errors import ConfigError, DatasetError, ShapeError

logger = logging.getLogger(__name__)

NUM_SCALES = 3
MODES = ("additive", "blend")
NORMALIZATIONS = ("sum", "mean")
IOU_EPS = 1e-9


@dataclass(frozen=True)
class KDWeights:
    """Weights of the three soft terms and how the soft loss joins the hard loss."""

    bbox: float = 0.5
    obj: float = 0.5
    cls: float = 0.5
    mode: str = "additive"
    blend: float = 0.5
    normalization: str = "sum"
    temperature: float = 1.0

    def validate(self) -> None:
        if min(self.bbox, self.obj, self.cls) < 0:
            raise ConfigError("KD weights must be non-negative", {"bbox": self.bbox, "obj": self.obj, "cls": self.cls})
        if self.mode not in MODES:
            raise ConfigError(f"unknown KD mode {self.mode!r}", {"mode": self.mode, "choices": list(MODES)})
        if not 0.0 <= self.blend <= 1.0:
            raise ConfigError("blend weight must lie in [0, 1]", {"blend": self.blend})
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}", {"normalization": self.normalization})
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive", {"temperature": self.temperature})


def _pairs(S: FpnLogits, T: FpnLogits) -> List[Tuple[ScaleLogits, ScaleLogits]]:
    if len(S.scales) != NUM_SCALES or len(T.scales) != NUM_SCALES:
        raise ShapeError(
            f"KD losses need exactly {NUM_SCALES} scales",
            {"student_scales": len(S.scales), "teacher_scales": len(T.scales)},
        )
    for index, (s, t) in enumerate(zip(S.scales, T.scales)):
        for name in ("cls", "reg", "obj"):
            a, b = getattr(s, name).shape, getattr(t, name).shape
            if a != b:
                raise ShapeError(
                    f"student and teacher {name} logits differ at scale {index}",
                    {"scale": index, "tensor": name, "student": list(a), "teacher": list(b)},
                )
    return list(zip(S.scales, T.scales))


def _aggregate(terms: Sequence[Tensor], batch_size: int, normalization: str) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = ops.add(total, term)
    if normalization == "sum":
        return ops.div(total, float(batch_size * NUM_SCALES))
    return ops.div(total, float(NUM_SCALES))


def _reduction(normalization: str) -> str:
    if normalization not in NORMALIZATIONS:
        raise ConfigError(f"unknown normalization {normalization!r}", {"normalization": normalization})
    return normalization


def _const(t: Tensor) -> Tensor:
    return Tensor(t.data)


def kd_bbox_loss(S: FpnLogits, T: FpnLogits, normalization: str = "sum") -> Tensor:
    """Squared error between student and teacher box regressions."""
    reduction = _reduction(normalization)
    terms = []
    for s, t in _pairs(S, T):
        diff = ops.sub(s.reg, _const(t.reg))
        sq = ops.mul(diff, diff)
        terms.append(ops.sum(sq) if reduction == "sum" else ops.mean(sq))
    return _aggregate(terms, S.batch_size, normalization)


def kd_obj_loss(S: FpnLogits, T: FpnLogits, normalization: str = "sum") -> Tensor:
    """BCE of student objectness probabilities against teacher probabilities as soft targets."""
    reduction = _reduction(normalization)
    terms = [
        bce(ops.sigmoid(s.obj), Tensor(ops.stable_sigmoid(t.obj.data)), reduction=reduction)
        for s, t in _pairs(S, T)
    ]
    return _aggregate(terms, S.batch_size, normalization)


def kd_cls_loss(S: FpnLogits, T: FpnLogits, normalization: str = "sum", temperature: float = 1.0) -> Tensor:
    """KL divergence of the student class distribution from the teacher's, per cell over the class axis.

    Evaluated as ``KL(log_softmax(S), softmax(T))``. With ``temperature != 1`` both logit sets are
    divided by it and the result is scaled by its square.
    """
    reduction = _reduction(normalization)
    terms = []
    for s, t in _pairs(S, T):
        s_cls = s.cls if temperature == 1.0 else ops.div(s.cls, temperature)
        t_cls = Tensor(t.cls.data / temperature)
        kl = kl_div_log_input(
            log_softmax(s_cls, axis=1),
            softmax(t_cls, axis=1),
            axis=1,
            reduction=reduction,
            log_p=log_softmax(t_cls, axis=1),
        )
        terms.append(kl if temperature == 1.0 else ops.mul(kl, temperature * temperature))
    return _aggregate(terms, S.batch_size, normalization)


def soft_components(S: FpnLogits, T: FpnLogits, w: KDWeights) -> Dict[str, Tensor]:
    """The three unweighted soft terms; terms with zero weight are skipped."""
    components: Dict[str, Tensor] = {}
    if w.bbox:
        components["bbox"] = kd_bbox_loss(S, T, w.normalization)
    if w.obj:
        components["obj"] = kd_obj_loss(S, T, w.normalization)
    if w.cls:
        components["cls"] = kd_cls_loss(S, T, w.normalization, w.temperature)
    return components


def weighted_soft(components: Dict[str, Tensor], w: KDWeights) -> Tensor:
    total = Tensor(0.0)
    for name, term in components.items():
        total = ops.add(total, ops.mul(term, float(getattr(w, name))))
    return total


def soft_loss(S: FpnLogits, T: FpnLogits, w: KDWeights) -> Tensor:
    """``bbox * L_bbox + obj * L_obj + cls * L_cls``."""
    return weighted_soft(soft_components(S, T, w), w)


def total_loss(hard: Tensor, soft: Tensor, w: KDWeights) -> Tensor:
    """Additive: ``hard + soft``. Blend: ``blend * hard + (1 - blend) * soft``."""
    if w.mode == "additive":
        return ops.add(hard, soft)
    if w.mode == "blend":
        return ops.add(ops.mul(hard, w.blend), ops.mul(soft, 1.0 - w.blend))
    raise ConfigError(f"unknown KD mode {w.mode!r}", {"mode": w.mode})


# Ground-truth loss


@dataclass
class _Positives:
    batch: List[int]
    ys: List[int]
    xs: List[int]
    classes: List[int]
    targets: List[Tuple[float, float, float, float]]


def assign_scale(box: GTBox, strides: Sequence[int]) -> int:
    """Index of the stride closest to the box size ``sqrt(w * h)`` in log space; ties go to the finer scale."""
    size = math.sqrt(max(box.w * box.h, 1e-12))
    distances = [abs(math.log(size) - math.log(s)) for s in strides]
    return int(np.argmin(distances))


def _assign(
    logits: FpnLogits,
    targets: Sequence[Sequence[GTBox]],
    strides: Sequence[int],
) -> List[_Positives]:
    height = logits.scales[0].obj.shape[2] * strides[0]
    width = logits.scales[0].obj.shape[3] * strides[0]
    num_classes = logits.scales[0].cls.shape[1]
    positives = [_Positives([], [], [], [], []) for _ in strides]
    taken = set()
    for b, boxes in enumerate(targets):
        for box in boxes:
            x, y, w, h = box.to_xywh()
            if w < 0 or h < 0 or x < -1e-6 or y < -1e-6 or x + w > width + 1e-6 or y + h > height + 1e-6:
                raise DatasetError(
                    "ground-truth box lies outside the image",
                    {"image": b, "box": [box.cx, box.cy, box.w, box.h], "image_size": [height, width]},
                )
            if not 0 <= box.class_id < num_classes:
                raise DatasetError("ground-truth class out of range", {"class_id": box.class_id, "num_classes": num_classes})
            scale = assign_scale(box, strides)
            stride = strides[scale]
            grid_h, grid_w = logits.scales[scale].obj.shape[2:]
            gx = min(int(box.cx // stride), grid_w - 1)
            gy = min(int(box.cy // stride), grid_h - 1)
            if (scale, b, gy, gx) in taken:
                continue
            taken.add((scale, b, gy, gx))
            p = positives[scale]
            p.batch.append(b)
            p.ys.append(gy)
            p.xs.append(gx)
            p.classes.append(box.class_id)
            p.targets.append((box.cx, box.cy, box.w, box.h))
    return positives


def _iou_loss(reg: Tensor, p: _Positives, stride: int) -> Tensor:
    """Sum of ``1 - IoU`` between decoded positives and their targets."""
    gx = Tensor(np.asarray(p.xs, dtype=reg.dtype))
    gy = Tensor(np.asarray(p.ys, dtype=reg.dtype))
    pcx = ops.mul(ops.add(reg[:, 0], gx), float(stride))
    pcy = ops.mul(ops.add(reg[:, 1], gy), float(stride))
    pw = ops.mul(ops.exp(reg[:, 2]), float(stride))
    ph = ops.mul(ops.exp(reg[:, 3]), float(stride))
    t = np.asarray(p.targets, dtype=reg.dtype)
    tx1, ty1 = Tensor(t[:, 0] - t[:, 2] / 2), Tensor(t[:, 1] - t[:, 3] / 2)
    tx2, ty2 = Tensor(t[:, 0] + t[:, 2] / 2), Tensor(t[:, 1] + t[:, 3] / 2)
    px1, px2 = ops.sub(pcx, ops.mul(pw, 0.5)), ops.add(pcx, ops.mul(pw, 0.5))
    py1, py2 = ops.sub(pcy, ops.mul(ph, 0.5)), ops.add(pcy, ops.mul(ph, 0.5))
    iw = ops.clamp(ops.sub(ops.minimum(px2, tx2), ops.maximum(px1, tx1)), 0.0)
    ih = ops.clamp(ops.sub(ops.minimum(py2, ty2), ops.maximum(py1, ty1)), 0.0)
    inter = ops.mul(iw, ih)
    union = ops.sub(ops.add(ops.mul(pw, ph), Tensor(t[:, 2] * t[:, 3])), inter)
    iou = ops.div(inter, ops.add(union, IOU_EPS))
    return ops.sum(ops.sub(1.0, iou))


def hard_loss(logits: FpnLogits, targets: Sequence[Sequence[GTBox]], strides: Sequence[int]) -> Tensor:
    """Ground-truth loss with a center-cell assignment.

    Each box is positive at the cell containing its center, on the scale whose stride best
    matches its size (the first box wins a contested cell). The loss is objectness BCE averaged
    over every cell, plus class BCE and ``1 - IoU`` averaged over positives.
    """
    if len(targets) != logits.batch_size:
        raise ShapeError("one target list per image is required", {"targets": len(targets), "batch": logits.batch_size})
    positives = _assign(logits, targets, strides)
    obj_sum = Tensor(0.0)
    cells = 0
    cls_sum = Tensor(0.0)
    cls_count = 0
    iou_sum = Tensor(0.0)
    pos_count = 0
    for scale, stride, p in zip(logits.scales, strides, positives):
        target = np.zeros(scale.obj.shape, dtype=scale.obj.dtype)
        if p.batch:
            target[p.batch, 0, p.ys, p.xs] = 1.0
        obj_sum = ops.add(obj_sum, bce(ops.sigmoid(scale.obj), Tensor(target), reduction="sum"))
        cells += target.size
        if not p.batch:
            continue
        index = (np.asarray(p.batch), slice(None), np.asarray(p.ys), np.asarray(p.xs))
        cls_logits = ops.getitem(scale.cls, index)
        onehot = np.zeros(cls_logits.shape, dtype=scale.cls.dtype)
        onehot[np.arange(len(p.classes)), p.classes] = 1.0
        cls_sum = ops.add(cls_sum, bce(ops.sigmoid(cls_logits), Tensor(onehot), reduction="sum"))
        cls_count += onehot.size
        iou_sum = ops.add(iou_sum, _iou_loss(ops.getitem(scale.reg, index), p, stride))
        pos_count += len(p.batch)
    loss = ops.div(obj_sum, float(cells))
    if pos_count:
        loss = ops.add(loss, ops.div(cls_sum, float(cls_count)))
        loss = ops.add(loss, ops.div(iou_sum, float(pos_count)))
    return loss
