"""Detection metrics: IoU, VOC-style greedy matching, AP at a single IoU
threshold and class-mean AP."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

INTERP11 = "interp11"
ALL_POINTS = "all_points"


class NoGroundTruthWarning(UserWarning):
    """A class was evaluated without any ground-truth boxes; its AP is 0."""


def _check_box(box) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x1 < x2 and y1 < y2):
        raise ValueError(f"degenerate box {box!r}")
    return x1, y1, x2, y2


@dataclass(frozen=True)
class Detection:
    scene_id: str
    box: tuple
    class_id: int
    score: float

    def __post_init__(self):
        object.__setattr__(self, "box", _check_box(self.box))
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass(frozen=True)
class GroundTruth:
    scene_id: str
    box: tuple
    class_id: int

    def __post_init__(self):
        object.__setattr__(self, "box", _check_box(self.box))


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = _check_box(a)
    bx1, by1, bx2, by2 = _check_box(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def match_detections(detections: Sequence[Detection], ground_truth: Sequence[GroundTruth], class_id: int, iou_threshold: float = 0.5):
    """Greedy VOC matching for one class.

    Returns ``(tp_flags, n_gt)`` with flags ordered by descending score
    (stable for equal scores). Each detection is compared with the
    highest-IoU ground truth in its scene (lowest index on ties); if that
    box is already taken the detection is a false positive.
    """
    dets = [d for d in detections if d.class_id == class_id]
    gts: dict[str, list[GroundTruth]] = {}
    n_gt = 0
    for g in ground_truth:
        if g.class_id == class_id:
            gts.setdefault(g.scene_id, []).append(g)
            n_gt += 1
    used = {sid: [False] * len(v) for sid, v in gts.items()}
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    flags = []
    for i in order:
        det = dets[i]
        best_j, best_iou = -1, -1.0
        for j, g in enumerate(gts.get(det.scene_id, ())):
            ov = iou(det.box, g.box)
            if ov > best_iou:
                best_j, best_iou = j, ov
        if best_j >= 0 and best_iou >= iou_threshold and not used[det.scene_id][best_j]:
            used[det.scene_id][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, n_gt


def precision_recall(flags: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=float))
    recall = tp / n_gt if n_gt else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, np.finfo(float).tiny)
    return precision, recall


def average_precision(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruth],
    class_id: int,
    iou_threshold: float = 0.5,
    mode: str = INTERP11,
) -> float:
    """AP of one class from its precision-recall curve.

    ``interp11`` averages the interpolated precision at recall 0, 0.1, ..., 1
    (VOC 2007); ``all_points`` integrates the monotone precision envelope.
    """
    if mode not in (INTERP11, ALL_POINTS):
        raise ValueError(f"unknown AP mode {mode!r}")
    flags, n_gt = match_detections(detections, ground_truth, class_id, iou_threshold)
    if n_gt == 0:
        warnings.warn(f"class {class_id} has no ground truth; AP set to 0", NoGroundTruthWarning, stacklevel=2)
        return 0.0
    if not flags:
        return 0.0
    prec, _ = precision_recall(flags, n_gt)
    tp = np.cumsum(np.asarray(flags, dtype=int))
    if mode == INTERP11:
        pts = []
        for k in range(11):
            # recall >= k/10, compared in integers
            mask = 10 * tp >= k * n_gt
            pts.append(float(prec[mask].max()) if mask.any() else 0.0)
        return math.fsum(pts) / 11.0
    # recall rises by exactly 1/n_gt at each true positive
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    return math.fsum(envelope[np.asarray(flags, dtype=bool)]) / n_gt


def map_over(classes: Iterable[int], per_class_ap: Mapping[int, float]) -> float:
    """Arithmetic mean AP over ``classes``."""
    cls = list(classes)
    if not cls:
        raise ValueError("no classes to average")
    missing = [c for c in cls if c not in per_class_ap]
    if missing:
        raise KeyError(f"no AP for classes {missing}")
    return math.fsum(per_class_ap[c] for c in cls) / len(cls)


def per_class_ap(detections, ground_truth, classes: Iterable[int], iou_threshold: float = 0.5, mode: str = INTERP11) -> dict[int, float]:
    by_class: dict[int, list[Detection]] = {}
    for d in detections:
        by_class.setdefault(d.class_id, []).append(d)
    gt_by_class: dict[int, list[GroundTruth]] = {}
    for g in ground_truth:
        gt_by_class.setdefault(g.class_id, []).append(g)
    return {
        c: average_precision(by_class.get(c, []), gt_by_class.get(c, []), c, iou_threshold, mode)
        for c in sorted(set(classes))
    }


def read_detections_csv(path) -> list[Detection]:
    """Rows ``scene_id,x1,y1,x2,y2,class_id,score`` with a header line."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            box = (row["x1"], row["y1"], row["x2"], row["y2"])
            out.append(Detection(row["scene_id"], box, int(row["class_id"]), float(row["score"])))
    return out


def write_detections_csv(path, detections: Iterable[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id", "x1", "y1", "x2", "y2", "class_id", "score"])
        for d in detections:
            w.writerow([d.scene_id, *(repr(v) for v in d.box), d.class_id, repr(float(d.score))])
