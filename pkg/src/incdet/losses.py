"""Training objectives for class-incremental two-stage detection.

All losses are differentiable scalars built from ``diffcore`` tensors.
Probability layout everywhere: column 0 is the background, columns 1..K are
the registered classes in registry order, so old classes always occupy a
prefix block after head expansion.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

CLS_VARIANTS = ("standard", "unbiased")
RCN_VARIANTS = ("unbiased", "l2", "ce", "none")


class LossError(Exception):
    pass


@dataclass
class LossWeights:
    """Hyper-parameters and variant selectors for the total objective."""

    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    tau: float = 0.1
    cls_variant: str = "unbiased"
    rcn_distill_variant: str = "none"
    rpn_distill: bool = False
    mask_distill: bool = False
    rpn_printed_gates: bool = False  # flip the RPN gate direction (student over teacher)

    def __post_init__(self):
        if self.cls_variant not in CLS_VARIANTS:
            raise LossError(f"unknown cls_variant: {self.cls_variant!r}")
        if self.rcn_distill_variant not in RCN_VARIANTS:
            raise LossError(f"unknown rcn_distill_variant: {self.rcn_distill_variant!r}")
        for name in ("lambda1", "lambda2", "lambda3", "tau"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be >= 0")

    @property
    def uses_teacher(self):
        return self.rcn_distill_variant != "none" or self.rpn_distill or self.mask_distill


@dataclass(frozen=True)
class StepView:
    """Class membership of one incremental step: Y^t and C^{t-1}."""

    new_classes: tuple
    old_classes: tuple


@dataclass
class RoiBatch:
    """Sampled RoIs with match flags, class targets and box regression targets."""

    rois: np.ndarray  # (N, 4) xyxy
    z: np.ndarray  # (N,) 1 positive / 0 negative
    labels: np.ndarray  # (N,) class ids, -1 for negatives
    box_targets: np.ndarray  # (N, 4) encoded deltas, valid where reg_labels >= 0
    mask_targets: np.ndarray | None = None  # (N, h, w) binary, valid where z == 1
    # near-miss proposals keep a regression target (and its class) even though
    # they are classification negatives, so the regressor learns to snap them
    reg_labels: np.ndarray | None = None  # (N,) class ids, -1 where no target

    def __post_init__(self):
        if self.reg_labels is None:
            self.reg_labels = self.labels.copy()

    def __len__(self):
        return len(self.rois)


@dataclass
class HeadOutputs:
    """Per-RoI classification head outputs over a class registry."""

    class_ids: tuple
    probs: dc.Tensor  # (N, K+1), column 0 = background
    boxes: dc.Tensor  # (N, 4K)
    masks: dc.Tensor | None = None  # (N, K, h, w), sigmoid outputs

    @property
    def num_classes(self):
        return len(self.class_ids)

    def col_of(self, class_id):
        return 1 + self.class_ids.index(class_id)

    def cols_of(self, class_ids):
        return np.array([self.col_of(c) for c in class_ids], dtype=np.intp)


@dataclass
class RpnOutputs:
    """Per-anchor objectness scores and coordinate deltas."""

    scores: dc.Tensor  # (A,)
    deltas: dc.Tensor  # (A, 4)

    def __post_init__(self):
        if self.scores.shape[0] == 0:
            raise LossError("RpnOutputs requires at least one anchor")


def _require_rois(targets):
    if len(targets) == 0:
        raise LossError("empty RoI batch")


def _check_class_prefix(teacher, student):
    n_old = teacher.num_classes
    if tuple(student.class_ids[:n_old]) != tuple(teacher.class_ids):
        raise LossError(
            f"class-set mismatch: teacher {teacher.class_ids} is not a prefix of "
            f"student {student.class_ids}"
        )
    return n_old


def standard_cls_loss(student, targets):
    """Mean NLL: positives against their class, negatives against background."""
    _require_rois(targets)
    cols = np.where(targets.z == 1, [student.col_of(c) if c >= 0 else 0 for c in targets.labels], 0)
    picked = dc.gather_rows(student.probs, cols)
    return dc.mul(dc.tmean(dc.log(picked)), -1.0)


def unbiased_cls_loss(student, targets, step):
    """Negatives may be explained by background or any previously seen class."""
    _require_rois(targets)
    for z, label in zip(targets.z, targets.labels):
        if z == 1 and label not in step.new_classes:
            raise LossError(
                f"positive RoI labeled {label}, outside the current step classes "
                f"{step.new_classes}"
            )
    pos_cols = np.array([student.col_of(c) if c >= 0 else 0 for c in targets.labels], dtype=np.intp)
    pos_term = dc.log(dc.gather_rows(student.probs, pos_cols))
    bg_old_cols = np.concatenate(([0], student.cols_of(step.old_classes)))
    neg_mass = dc.tsum(dc.take(student.probs, bg_old_cols, axis=1), axis=1)
    neg_term = dc.log(neg_mass)
    z = targets.z.astype(np.float64)
    per_roi = dc.add(dc.mul(pos_term, z), dc.mul(neg_term, 1.0 - z))
    return dc.mul(dc.tmean(per_roi), -1.0)


def unbiased_kd_cls(teacher, student):
    """Teacher background mass may be explained by student background or new classes."""
    n_old = _check_class_prefix(teacher, student)
    n_total = student.num_classes
    bg_new_cols = np.concatenate(([0], np.arange(n_old + 1, n_total + 1)))
    bg_new_mass = dc.tsum(dc.take(student.probs, bg_new_cols, axis=1), axis=1)
    bg_term = dc.mul(dc.take(teacher.probs, [0], axis=1), dc.reshape(dc.log(bg_new_mass), (-1, 1)))
    old_cols = np.arange(1, n_old + 1)
    old_term = dc.mul(
        dc.take(teacher.probs, old_cols, axis=1), dc.log(dc.take(student.probs, old_cols, axis=1))
    )
    per_roi = dc.add(dc.tsum(bg_term, axis=1), dc.tsum(old_term, axis=1))
    return dc.mul(dc.tmean(per_roi), -1.0 / (n_old + 1))


def l2_kd_cls(teacher, student):
    """Ablation baseline: MSE over old-class (plus background) probabilities."""
    n_old = _check_class_prefix(teacher, student)
    cols = np.arange(0, n_old + 1)
    diff = dc.sub(dc.take(student.probs, cols, axis=1), teacher.probs)
    return dc.tmean(dc.mul(diff, diff))


def ce_kd_cls(teacher, student):
    """Ablation baseline: cross-entropy over old-class (plus background) probabilities."""
    n_old = _check_class_prefix(teacher, student)
    cols = np.arange(0, n_old + 1)
    inner = dc.tsum(dc.mul(teacher.probs, dc.log(dc.take(student.probs, cols, axis=1))), axis=1)
    return dc.mul(dc.tmean(inner), -1.0 / (n_old + 1))


def smooth_l1(x, y):
    """Elementwise 0.5 d^2 (|d| < 1) else |d| - 0.5, mean-reduced."""
    d = dc.sub(x, y)
    inside = (np.abs(d.values) < 1.0).astype(np.float64)
    sign = np.sign(d.values)
    quad = dc.mul(dc.mul(d, d), 0.5 * inside)
    lin = dc.mul(dc.sub(dc.mul(d, sign), 0.5), 1.0 - inside)
    return dc.tmean(dc.add(quad, lin))


def rcn_distill_loss(teacher, student, variant):
    """Classification-head distillation plus old-class box distillation."""
    if variant == "none":
        return dc.constant(0.0)
    if variant == "unbiased":
        cls_term = unbiased_kd_cls(teacher, student)
    elif variant == "l2":
        cls_term = l2_kd_cls(teacher, student)
    elif variant == "ce":
        cls_term = ce_kd_cls(teacher, student)
    else:
        raise LossError(f"unknown distillation variant: {variant!r}")
    n_old = teacher.num_classes
    student_old_boxes = dc.take(student.boxes, np.arange(4 * n_old), axis=1)
    return dc.add(cls_term, smooth_l1(student_old_boxes, teacher.boxes))


def rpn_distill_loss(teacher, student, tau, printed_gates=False):
    """Gated objectness/coordinate distillation over anchors.

    Gates are non-differentiable selectors. By default the score gate opens
    where the teacher score is at least the student one, the coordinate gate
    where it exceeds it by tau; ``printed_gates`` flips both directions.
    """
    if teacher.scores.shape != student.scores.shape:
        raise LossError(
            f"anchor count mismatch: {teacher.scores.shape} vs {student.scores.shape}"
        )
    s_t = teacher.scores.values
    s_s = student.scores.values
    if printed_gates:
        gate_score = (s_s >= s_t).astype(np.float64)
        gate_coord = (s_s >= s_t + tau).astype(np.float64)
    else:
        gate_score = (s_t >= s_s).astype(np.float64)
        gate_coord = (s_t >= s_s + tau).astype(np.float64)
    score_diff = dc.sub(student.scores, teacher.scores)
    score_dist = dc.mul(score_diff, np.sign(score_diff.values))
    coord_diff = dc.sub(student.deltas, teacher.deltas)
    coord_dist = dc.sqrt(dc.tsum(dc.mul(coord_diff, coord_diff), axis=1))
    per_anchor = dc.add(dc.mul(score_dist, gate_score), dc.mul(coord_dist, gate_coord))
    return dc.tmean(per_anchor)


def _bce(pred, target):
    """Per-element binary cross-entropy against a constant 0/1 target."""
    target = np.asarray(target, dtype=np.float64)
    pos = dc.mul(dc.log(pred), target)
    neg = dc.mul(dc.log(dc.sub(1.0, pred)), 1.0 - target)
    return dc.mul(dc.add(pos, neg), -1.0)


def binary_cross_entropy(pred, target):
    """Mean BCE; used for RPN objectness training."""
    return dc.tmean(_bce(pred, target))


def mask_cls_loss(student, targets):
    """Per-pixel BCE of each positive RoI's ground-truth-class mask."""
    _require_rois(targets)
    pos_idx = np.where(targets.z == 1)[0]
    if len(pos_idx) == 0:
        return dc.constant(0.0)
    if student.masks is None or targets.mask_targets is None:
        raise LossError("mask_cls_loss requires mask outputs and mask targets")
    n, k = student.masks.shape[0], student.masks.shape[1]
    hw = student.masks.shape[2] * student.masks.shape[3]
    flat = dc.reshape(student.masks, (n * k, hw))
    channels = np.array([student.col_of(targets.labels[i]) - 1 for i in pos_idx], dtype=np.intp)
    rows = pos_idx * k + channels
    picked = dc.take(flat, rows, axis=0)
    tgt = targets.mask_targets[pos_idx].reshape(len(pos_idx), hw)
    return dc.tmean(_bce(picked, tgt))


def mask_distill_loss(teacher, student):
    """Per-pixel BCE between teacher and student masks on old-class channels only."""
    n_old = _check_class_prefix(teacher, student)
    if n_old == 0:
        return dc.constant(0.0)
    if teacher.masks is None or student.masks is None:
        raise LossError("mask_distill_loss requires mask outputs on both models")
    old_student = dc.take(student.masks, np.arange(n_old), axis=1)
    return dc.tmean(_bce(old_student, teacher.masks.values))


def total_objective(base_loss, weights, rcn_dist=None, rpn_dist=None, mask_dist=None):
    """base + lambda1 * RCN distill + lambda2 * RPN distill + lambda3 * mask distill."""
    total = base_loss
    if rcn_dist is not None:
        total = dc.add(total, dc.mul(rcn_dist, weights.lambda1))
    if rpn_dist is not None:
        total = dc.add(total, dc.mul(rpn_dist, weights.lambda2))
    if mask_dist is not None:
        total = dc.add(total, dc.mul(mask_dist, weights.lambda3))
    return total
