"""Detection / instance-segmentation metrics: IoU, NMS, AP, mAP suites.

AP follows the VOC conventions: greedy confidence-ranked matching against
unmatched ground truth, duplicates count as false positives, and either
11-point or continuous (area-under-envelope) interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

MASK_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass
class Detection:
    image_id: int
    class_id: int
    box: np.ndarray  # xyxy
    score: float
    mask: np.ndarray | None = None


@dataclass
class GroundTruthObject:
    image_id: int
    class_id: int
    box: np.ndarray
    mask: np.ndarray | None = None


@dataclass
class EvalReport:
    mode: str
    per_class_ap: dict = field(default_factory=dict)  # class_id -> float | None
    old_map: float | None = None
    new_map: float | None = None
    all_map: float = 0.0
    avg: float | None = None
    avg_s: float | None = None
    avg_s_alt: float | None = None

    def to_dict(self):
        return {
            "mode": self.mode,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "old_map": self.old_map,
            "new_map": self.new_map,
            "all_map": self.all_map,
            "avg": self.avg,
            "avg_s": self.avg_s,
            "avg_s_alt": self.avg_s_alt,
        }


def _check_box(box):
    box = np.asarray(box, dtype=np.float64)
    if box[2] <= box[0] or box[3] <= box[1]:
        raise ValueError(f"degenerate zero-area box: {box.tolist()}")
    return box


def iou(box_a, box_b):
    """Intersection over union of two xyxy boxes."""
    a = _check_box(box_a)
    b = _check_box(box_b)
    return float(kernels.box_iou_matrix(a[None, :], b[None, :])[0, 0])


def mask_iou(mask_a, mask_b):
    """Intersection over union of two binary masks of identical shape."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("empty mask in mask_iou")
    return float(kernels.mask_iou_pairs(a[None], b[None])[0])


def nms(detections, iou_threshold):
    """Greedy per-class suppression, confidence descending.

    Ties are broken by lower class id, then by insertion order. Returns kept
    detections sorted by descending score (same tie-breaks).
    """
    kept = []
    class_ids = sorted({d.class_id for d in detections})
    for cid in class_ids:
        group = [(i, d) for i, d in enumerate(detections) if d.class_id == cid]
        if not group:
            continue
        boxes = np.stack([_check_box(d.box) for _, d in group])
        scores = np.array([d.score for _, d in group], dtype=np.float64)
        for k in kernels.nms_keep(boxes, scores, iou_threshold):
            kept.append(group[int(k)])
    kept.sort(key=lambda pair: (-pair[1].score, pair[1].class_id, pair[0]))
    return [d for _, d in kept]


def _match_tp_fp(detections, ground_truth, iou_threshold, use_mask):
    """Rank detections, greedily match unmatched GT; returns (tp, fp, n_gt)."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    gt_by_image = {}
    for gi, g in enumerate(ground_truth):
        gt_by_image.setdefault(g.image_id, []).append(gi)
    matched = [False] * len(ground_truth)
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, di in enumerate(order):
        det = detections[di]
        best_iou, best_gi = 0.0, -1
        for gi in gt_by_image.get(det.image_id, ()):
            if matched[gi]:
                continue
            g = ground_truth[gi]
            if use_mask:
                overlap = mask_iou(det.mask, g.mask) if det.mask.any() and g.mask.any() else 0.0
            else:
                overlap = iou(det.box, g.box)
            if overlap > best_iou:
                best_iou, best_gi = overlap, gi
        if best_gi >= 0 and best_iou >= iou_threshold:
            matched[best_gi] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    return tp, fp, len(ground_truth)


def _ap_from_pr(tp, fp, n_gt, interpolation):
    if n_gt == 0:
        return None
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-300)
    if interpolation == "11point":
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r - 1e-12
            ap += precision[mask].max() if mask.any() else 0.0
        return ap / 11.0
    if interpolation == "continuous":
        r = np.concatenate(([0.0], recall, [1.0]))
        p = np.concatenate(([0.0], precision, [0.0]))
        for i in range(len(p) - 2, -1, -1):
            p[i] = max(p[i], p[i + 1])
        idx = np.where(r[1:] != r[:-1])[0]
        return float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))
    raise ValueError(f"unknown interpolation: {interpolation!r}")


def average_precision(detections, ground_truth, iou_threshold, interpolation="11point",
                      use_mask=False):
    """AP for a single class; None when the class has no ground truth."""
    classes = {d.class_id for d in detections} | {g.class_id for g in ground_truth}
    if len(classes) > 1:
        raise ValueError(f"average_precision expects a single class, got {sorted(classes)}")
    tp, fp, n_gt = _match_tp_fp(detections, ground_truth, iou_threshold, use_mask)
    return _ap_from_pr(tp, fp, n_gt, interpolation)


def _per_class_ap(detections, ground_truth, iou_threshold, interpolation, use_mask):
    classes = sorted({g.class_id for g in ground_truth} | {d.class_id for d in detections})
    out = {}
    for cid in classes:
        dets = [d for d in detections if d.class_id == cid]
        gts = [g for g in ground_truth if g.class_id == cid]
        out[cid] = average_precision(dets, gts, iou_threshold, interpolation, use_mask)
    return out


def map_suite(detections, ground_truth, mode, interpolation=None):
    """mode 'box@0.5': box mAP at IoU 0.5 (11-point by default).

    mode 'mask@[.5:.95]': mask mAP averaged over the 10 thresholds
    0.5..0.95 step 0.05 (continuous AP by default).
    """
    if mode == "box@0.5":
        interp = interpolation or "11point"
        per_class = _per_class_ap(detections, ground_truth, 0.5, interp, use_mask=False)
    elif mode == "mask@[.5:.95]":
        if any(d.mask is None for d in detections) or any(g.mask is None for g in ground_truth):
            raise ValueError("mask mode requires masks on detections and ground truth")
        interp = interpolation or "continuous"
        accum = {}
        for thr in MASK_THRESHOLDS:
            step = _per_class_ap(detections, ground_truth, thr, interp, use_mask=True)
            for cid, ap in step.items():
                accum.setdefault(cid, []).append(ap)
        per_class = {
            cid: (None if any(a is None for a in aps) else float(np.mean(aps)))
            for cid, aps in accum.items()
        }
    else:
        raise ValueError(f"unknown mode: {mode!r}")
    defined = [ap for ap in per_class.values() if ap is not None]
    report = EvalReport(mode=mode, per_class_ap=per_class)
    report.all_map = float(np.mean(defined)) if defined else 0.0
    return report


def _mean_over(per_class_ap, classes):
    vals = [per_class_ap[c] for c in classes if per_class_ap.get(c) is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(report, schedule, t, per_step_all_map=None, per_step_avg=None):
    """Fill old/new/Avg (and Avg-S given the per-step history) into a report.

    Avg-S default: mean of all-class-seen-so-far mAP after every step
    including the first; avg_s_alt averages the Avg metric instead.
    """
    old = list(schedule.old_classes(t))
    new = list(schedule.new_classes(t))
    report.old_map = _mean_over(report.per_class_ap, old)
    report.new_map = _mean_over(report.per_class_ap, new)
    if t == 1 or report.old_map is None:
        report.avg = report.new_map
    else:
        report.avg = (report.old_map + report.new_map) / 2.0
    if per_step_all_map:
        report.avg_s = float(np.mean(per_step_all_map))
    if per_step_avg:
        vals = [v for v in per_step_avg if v is not None]
        report.avg_s_alt = float(np.mean(vals)) if vals else None
    return report
