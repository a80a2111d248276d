"""Detection metrics: IoU, greedy matching, precision, AP50/AP and frame-share video metrics.

Boxes passed to :func:`iou` are top-left ``(x, y, w, h)``; detections and labels elsewhere are
center-format and converted here.
"""

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from sonar_kd.core.boxes import XYWH, DetBox, GTBox, iou_xywh
from sonar_kd.errors import ConfigError, FormatError, MissingFileError

logger = logging.getLogger(__name__)

DEFAULT_IOU = 0.5
AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
REPORT_COLUMNS = ("TP", "FP", "Pr", "AP50", "AP", "Detection", "FP")


def iou(a: XYWH, b: XYWH) -> float:
    """Overlap over union in [0, 1]; 0 when the union has zero area."""
    return iou_xywh(a, b)


def _pred_key(box: DetBox) -> Tuple[float, float, float, float, float]:
    return (-box.score, box.cx, box.cy, box.w, box.h)


@dataclass
class FrameEval:
    """Predictions of one frame matched against its ground truth at one IoU threshold."""

    frame: int
    predictions: List[DetBox]
    ground_truth: List[GTBox]
    pred_matched: List[bool] = field(default_factory=list)
    gt_matched: List[bool] = field(default_factory=list)
    iou_thresh: float = DEFAULT_IOU

    @property
    def tp(self) -> int:
        return sum(self.pred_matched)

    @property
    def fp(self) -> int:
        return len(self.pred_matched) - self.tp

    @property
    def fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


def match(
    preds: Sequence[DetBox],
    gts: Sequence[GTBox],
    iou_thresh: float = DEFAULT_IOU,
    frame: int = 0,
) -> FrameEval:
    """Greedy matching in descending score order.

    Each prediction takes the unmatched same-class ground truth with the highest IoU (lowest
    index on ties) if that IoU reaches ``iou_thresh``; otherwise it is a false positive.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ConfigError("IoU threshold must lie in (0, 1]", {"iou_thresh": iou_thresh})
    ordered = sorted(preds, key=_pred_key)
    gt_boxes = [g.to_xywh() for g in gts]
    gt_matched = [False] * len(gts)
    pred_matched = []
    for pred in ordered:
        box = pred.to_xywh()
        best, best_iou = -1, -1.0
        for j, gt in enumerate(gts):
            if gt_matched[j] or gt.class_id != pred.class_id:
                continue
            overlap = iou(box, gt_boxes[j])
            if overlap > best_iou:
                best, best_iou = j, overlap
        hit = best >= 0 and best_iou >= iou_thresh
        if hit:
            gt_matched[best] = True
        pred_matched.append(hit)
    return FrameEval(frame, ordered, list(gts), pred_matched, gt_matched, iou_thresh)


def precision(tp: float, fp: float) -> float:
    """``tp / (tp + fp)``, and 1.0 when there are no predictions at all."""
    total = tp + fp
    return 1.0 if total == 0 else tp / total


def interpolated_ap(recall: np.ndarray, prec: np.ndarray) -> float:
    """All-points interpolated area under a precision-recall curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap_at(frames: Sequence[FrameEval], iou_thresh: float) -> float:
    """Mean over ground-truth classes of the interpolated AP at one IoU threshold."""
    rematched = [match(f.predictions, f.ground_truth, iou_thresh, f.frame) for f in frames]
    classes = sorted({g.class_id for f in rematched for g in f.ground_truth})
    if not classes:
        return 0.0
    # Frame order, then in-frame score order, breaks ties between equal scores.
    ranked = [(p, hit) for f in rematched for p, hit in zip(f.predictions, f.pred_matched)]
    ranked = [ranked[i] for i in sorted(range(len(ranked)), key=lambda i: (-ranked[i][0].score, i))]
    scores = []
    for cls in classes:
        n_gt = sum(1 for f in rematched for g in f.ground_truth if g.class_id == cls)
        flags = np.array([hit for p, hit in ranked if p.class_id == cls], dtype=bool)
        if flags.size == 0:
            scores.append(0.0)
            continue
        cum_tp = np.cumsum(flags)
        cum_fp = np.cumsum(~flags)
        scores.append(interpolated_ap(cum_tp / n_gt, cum_tp / (cum_tp + cum_fp)))
    return float(np.mean(scores))


def ap50(frames: Sequence[FrameEval]) -> float:
    return ap_at(frames, 0.5)


def ap(frames: Sequence[FrameEval]) -> float:
    """AP averaged over IoU thresholds 0.50, 0.55, ..., 0.95."""
    return float(np.mean([ap_at(frames, t) for t in AP_THRESHOLDS]))


def video_metrics(frames: Sequence[FrameEval], wall_present: Sequence[bool]) -> Tuple[float, float]:
    """(detection duration %, video false-positive %).

    Detection duration is the share of wall-present frames with at least one true positive;
    the false-positive share is taken over all frames.
    """
    if len(frames) != len(wall_present):
        raise ConfigError("timeline length differs from the number of frames", {"frames": len(frames), "timeline": len(wall_present)})
    if not frames:
        return 0.0, 0.0
    walls = [f for f, present in zip(frames, wall_present) if present]
    duration = 100.0 * sum(1 for f in walls if f.tp > 0) / len(walls) if walls else 0.0
    fp_share = 100.0 * sum(1 for f in frames if f.fp > 0) / len(frames)
    return duration, fp_share


def timeline_frame_eval(preds: Sequence[DetBox], wall_present: bool, frame: int) -> FrameEval:
    """Frame judged by presence only: detections are true positives exactly when a wall is visible."""
    ordered = sorted(preds, key=_pred_key)
    return FrameEval(frame, ordered, [], [wall_present] * len(ordered), [], DEFAULT_IOU)


@dataclass
class EvalReport:
    """Table-style summary. Percentages are in [0, 100]; AP values in [0, 1]."""

    tp_pct: float = 0.0
    fp_pct: float = 0.0
    precision_pct: float = 0.0
    ap50: float = 0.0
    ap: float = 0.0
    detection_duration_pct: float = 0.0
    video_fp_pct: float = 0.0
    num_frames: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    box_precision: float = 0.0

    def row(self) -> Tuple[float, ...]:
        return (
            self.tp_pct,
            self.fp_pct,
            self.precision_pct,
            self.ap50,
            self.ap,
            self.detection_duration_pct,
            self.video_fp_pct,
        )

    def to_dict(self) -> Dict[str, Union[int, float]]:
        return asdict(self)


def report(frames: Sequence[FrameEval], wall_present: Optional[Sequence[bool]] = None) -> EvalReport:
    """Aggregate matched frames into an EvalReport.

    TP and FP are frame shares (a frame with at least one TP counts once toward TP), and Pr is
    derived from those two columns. Wall presence defaults to "frame has ground truth".
    """
    if not frames:
        return EvalReport()
    timeline = list(wall_present) if wall_present is not None else [bool(f.ground_truth) for f in frames]
    n = len(frames)
    tp_pct = 100.0 * sum(1 for f in frames if f.tp > 0) / n
    fp_pct = 100.0 * sum(1 for f in frames if f.fp > 0) / n
    duration, video_fp = video_metrics(frames, timeline)
    tp, fp, fn = sum(f.tp for f in frames), sum(f.fp for f in frames), sum(f.fn for f in frames)
    has_gt = any(f.ground_truth for f in frames)
    result = EvalReport(
        tp_pct=tp_pct,
        fp_pct=fp_pct,
        precision_pct=100.0 * precision(tp_pct, fp_pct),
        ap50=ap50(frames) if has_gt else 0.0,
        ap=ap(frames) if has_gt else 0.0,
        detection_duration_pct=duration,
        video_fp_pct=video_fp,
        num_frames=n,
        tp=tp,
        fp=fp,
        fn=fn,
        box_precision=precision(tp, fp),
    )
    logger.debug("Report over %d frames: %s", n, result)
    return result


def evaluate(
    predictions: Sequence[Sequence[DetBox]],
    ground_truth: Sequence[Sequence[GTBox]],
    iou_thresh: float = DEFAULT_IOU,
) -> List[FrameEval]:
    if len(predictions) != len(ground_truth):
        raise ConfigError("one prediction list per frame is required", {"predictions": len(predictions), "frames": len(ground_truth)})
    return [match(p, g, iou_thresh, i) for i, (p, g) in enumerate(zip(predictions, ground_truth))]


# Renderings


def _format_row(label: str, rep: EvalReport) -> List[str]:
    values = rep.row()
    return [label] + [f"{v:.2f}" for v in values]


def report_to_csv(rows: Iterable[Tuple[str, EvalReport]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("model",) + REPORT_COLUMNS)
    for label, rep in rows:
        writer.writerow(_format_row(label, rep))
    return buffer.getvalue()


def report_to_json(rows: Iterable[Tuple[str, EvalReport]]) -> str:
    payload = [{"model": label, **rep.to_dict()} for label, rep in rows]
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def report_to_text(rows: Iterable[Tuple[str, EvalReport]]) -> str:
    """Plain aligned table, for files and non-terminal output."""
    table = [["model", *REPORT_COLUMNS]] + [_format_row(label, rep) for label, rep in rows]
    widths = [max(len(r[c]) for r in table) for c in range(len(table[0]))]
    lines = ["  ".join(cell.rjust(w) if c else cell.ljust(w) for c, (cell, w) in enumerate(zip(r, widths))) for r in table]
    return "\n".join(line.rstrip() for line in lines) + "\n"


# Prediction interchange files


def format_predictions(boxes: Iterable[DetBox], width: int, height: int) -> str:
    lines = [
        f"{b.class_id} {b.score:.6f} {b.cx / width:.8f} {b.cy / height:.8f} {b.w / width:.8f} {b.h / height:.8f}"
        for b in boxes
    ]
    return "".join(line + "\n" for line in lines)


def write_predictions(path: Union[str, Path], boxes: Iterable[DetBox], width: int, height: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_predictions(boxes, width, height), encoding="utf-8")


def read_predictions(path: Union[str, Path], width: int, height: int) -> List[DetBox]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"prediction file not found: {path}", {"path": str(path)})
    boxes = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        try:
            if len(fields) != 6:
                raise ValueError(f"expected 6 fields, got {len(fields)}")
            cls = int(fields[0])
            score, cx, cy, w, h = (float(v) for v in fields[1:])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}", {"path": str(path), "line": lineno}) from exc
        boxes.append(DetBox(cls, score, cx * width, cy * height, w * width, h * height))
    return boxes


def read_timeline(path: Union[str, Path]) -> Dict[str, bool]:
    """Parse ``<frame id> <0|1>`` lines (``#`` starts a comment) into frame id -> wall present."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"timeline file not found: {path}", {"path": str(path)})
    timeline: Dict[str, bool] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 2 or fields[1] not in ("0", "1"):
            raise FormatError(f"{path}:{lineno}: expected '<frame> <0|1>'", {"path": str(path), "line": lineno})
        timeline[fields[0]] = fields[1] == "1"
    return timeline
