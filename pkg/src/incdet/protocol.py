"""Multi-step incremental training orchestration.

A schedule partitions the class set into ordered groups Y^1..Y^T. Each step
freezes the previous model as the teacher, widens the student's head, builds
the missing-annotation step dataset, trains with the method's loss wiring and
evaluates on the fully annotated test split.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import losses as ls
from .detector import (
    DetectorConfig,
    ToyDetector,
    detect,
    expand_head,
    freeze_teacher,
    match_and_sample,
    rpn_targets,
)
from .evalmetrics import GroundTruthObject, aggregate, map_suite
from .synthdata import build_step_dataset


# box regression terms are much smaller than the classification terms near
# convergence; weight them up so localization actually tightens
REG_WEIGHT = 10.0


class ProtocolError(Exception):
    pass


class TrainingDiverged(ProtocolError):
    def __init__(self, iteration, components):
        self.iteration = iteration
        self.components = components
        parts = ", ".join(f"{k}={v:.4g}" for k, v in components.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {parts}")


@dataclass(frozen=True)
class TaskSchedule:
    """Ordered disjoint class groups; views C^t, C^{t-1} and Y^t."""

    groups: tuple

    def __post_init__(self):
        flat = [c for g in self.groups for c in g]
        if len(set(flat)) != len(flat):
            raise ProtocolError("schedule groups must be pairwise disjoint")
        if any(len(g) == 0 for g in self.groups):
            raise ProtocolError("schedule groups must be non-empty")

    @property
    def num_steps(self):
        return len(self.groups)

    @property
    def all_classes(self):
        return tuple(c for g in self.groups for c in g)

    def new_classes(self, t):
        if not 1 <= t <= self.num_steps:
            raise ProtocolError(f"invalid step index {t}")
        return tuple(self.groups[t - 1])

    def old_classes(self, t):
        return tuple(c for g in self.groups[: t - 1] for c in g)

    def seen_classes(self, t):
        return tuple(c for g in self.groups[:t] for c in g)

    def step_view(self, t):
        return ls.StepView(new_classes=self.new_classes(t), old_classes=self.old_classes(t))

    @staticmethod
    def from_spec(spec, num_classes):
        """'joint', or group sizes like '3-3' / '2-2-2', over ids 0..num_classes-1."""
        if spec == "joint":
            return TaskSchedule((tuple(range(num_classes)),))
        try:
            sizes = [int(p) for p in spec.split("-")]
        except ValueError:
            raise ProtocolError(f"bad schedule spec: {spec!r}")
        if sum(sizes) != num_classes:
            raise ProtocolError(
                f"schedule {spec!r} covers {sum(sizes)} classes, corpus has {num_classes}"
            )
        groups, start = [], 0
        for s in sizes:
            groups.append(tuple(range(start, start + s)))
            start += s
        return TaskSchedule(tuple(groups))


# Ablation-table ordering: fine-tuning, unbiased CE only, +unbiased KD,
# then the three full variants (L2 / CE / unbiased distillation + RPN).
METHOD_PRESETS = {
    "joint": dict(cls_variant="standard", rcn_distill_variant="none", rpn_distill=False),
    "finetune": dict(cls_variant="standard", rcn_distill_variant="none", rpn_distill=False),
    "uce": dict(cls_variant="unbiased", rcn_distill_variant="none", rpn_distill=False),
    "uce-ukd": dict(cls_variant="unbiased", rcn_distill_variant="unbiased", rpn_distill=False),
    "ilod-l2": dict(cls_variant="unbiased", rcn_distill_variant="l2", rpn_distill=True),
    "ce-distill": dict(cls_variant="unbiased", rcn_distill_variant="ce", rpn_distill=True),
    "mma": dict(cls_variant="unbiased", rcn_distill_variant="unbiased", rpn_distill=True),
}
ABLATION_ORDER = ("finetune", "uce", "uce-ukd", "ilod-l2", "ce-distill", "mma")


def lambda2_for_step(schedule, t):
    """Heavier RPN distillation for smaller steps."""
    frac = len(schedule.new_classes(t)) / len(schedule.all_classes)
    if frac >= 0.5:
        return 0.1
    if frac >= 0.25:
        return 0.5
    return 1.0


def method_weights(method, schedule, t, base=None):
    if method not in METHOD_PRESETS:
        raise ProtocolError(f"unknown method {method!r}; choose from {sorted(METHOD_PRESETS)}")
    base = base or ls.LossWeights()
    w = replace(base, **METHOD_PRESETS[method])
    if w.rpn_distill:
        w = replace(w, lambda2=lambda2_for_step(schedule, t))
    return w


@dataclass
class TrainConfig:
    lr_first: float = 1e-2
    lr_incremental: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 2000
    batch_size: int = 2
    seed: int = 0
    lr_decay: float = 0.1
    lr_decay_at: float = 0.75  # fraction of iterations after which lr drops
    tau: float = 0.1
    mask_distill: bool = False
    rpn_printed_gates: bool = False

    def __post_init__(self):
        for name in ("lr_first", "lr_incremental", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ProtocolError(f"{name} must be >= 0")
        if self.iterations < 0 or self.batch_size < 1:
            raise ProtocolError("iterations must be >= 0 and batch_size >= 1")


@dataclass
class StepResult:
    step: int
    classes: tuple
    final_loss: float
    box_report: object
    mask_report: object = None


@dataclass
class ExperimentResult:
    method: str
    schedule: TaskSchedule
    seed: int
    steps: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _scene_losses(model, teacher, scene, annotations, step_view, weights, config, seed):
    """All loss components for one training image."""
    comp = {}
    feats = model.forward_features(scene.cells)
    rpn_out = model.forward_rpn(feats)

    idx, cls_targets, pos_idx, delta_targets = rpn_targets(annotations, model.config, seed)
    picked = dc.take(rpn_out.scores, idx, axis=0)
    comp["rpn_cls"] = ls.binary_cross_entropy(picked, cls_targets)
    if len(pos_idx):
        comp["rpn_reg"] = dc.mul(
            ls.smooth_l1(dc.take(rpn_out.deltas, pos_idx, axis=0), dc.constant(delta_targets)),
            REG_WEIGHT,
        )

    proposals = model.propose(rpn_out)
    if annotations:
        gt_boxes = np.stack([o.box for o in annotations])
        proposals = np.concatenate([proposals, gt_boxes]) if len(proposals) else gt_boxes
    batch = match_and_sample(proposals, annotations, model.config, seed + 1)
    head = model.forward_head(feats, batch.rois)

    if weights.cls_variant == "unbiased":
        comp["rcn_cls"] = ls.unbiased_cls_loss(head, batch, step_view)
    else:
        comp["rcn_cls"] = ls.standard_cls_loss(head, batch)

    reg = np.where(batch.reg_labels >= 0)[0]
    if len(reg):
        k = model.num_classes
        flat = dc.reshape(head.boxes, (len(batch) * k, 4))
        rows = reg * k + np.array(
            [head.col_of(batch.reg_labels[i]) - 1 for i in reg], dtype=np.intp
        )
        comp["rcn_reg"] = dc.mul(
            ls.smooth_l1(dc.take(flat, rows, axis=0), dc.constant(batch.box_targets[reg])),
            REG_WEIGHT,
        )
    if model.config.with_masks:
        comp["mask_cls"] = ls.mask_cls_loss(head, batch)

    if teacher is not None:
        t_feats = teacher.forward_features(scene.cells)
        t_head = teacher.forward_head(t_feats, batch.rois)
        if weights.rcn_distill_variant != "none":
            comp["rcn_dist"] = ls.rcn_distill_loss(t_head, head, weights.rcn_distill_variant)
        if weights.rpn_distill:
            t_rpn = teacher.forward_rpn(t_feats)
            comp["rpn_dist"] = ls.rpn_distill_loss(
                t_rpn, rpn_out, weights.tau, printed_gates=weights.rpn_printed_gates
            )
        if weights.mask_distill and teacher.config.with_masks:
            comp["mask_dist"] = ls.mask_distill_loss(t_head, head)
    return comp


def _combine(comp, weights):
    base = dc.constant(0.0)
    for key in ("rpn_cls", "rpn_reg", "rcn_cls", "rcn_reg", "mask_cls"):
        if key in comp:
            base = dc.add(base, comp[key])
    return ls.total_objective(
        base,
        weights,
        rcn_dist=comp.get("rcn_dist"),
        rpn_dist=comp.get("rpn_dist"),
        mask_dist=comp.get("mask_dist"),
    )


def run_step(student, teacher, dataset, step_view, weights, config, lr):
    """SGD with momentum over the step dataset; returns the loss trace."""
    if teacher is not None and not teacher.frozen:
        raise ProtocolError("teacher must be frozen")
    if not dataset.entries:
        raise ProtocolError(f"step {dataset.step_index} has no training scenes")
    velocity = {k: np.zeros_like(p.values) for k, p in student.params.items()}
    trace = []
    base_lr = lr
    decay_from = int(config.iterations * config.lr_decay_at)
    for it in range(config.iterations):
        lr = base_lr * config.lr_decay if it >= decay_from else base_lr
        rng = np.random.default_rng([config.seed, dataset.step_index, it])
        picks = rng.integers(0, len(dataset.entries), size=config.batch_size)
        total = dc.constant(0.0)
        comps = {}
        for scene_idx in picks:
            scene, annotations = dataset.entries[int(scene_idx)]
            comp = _scene_losses(
                student, teacher, scene, annotations, step_view, weights, config,
                seed=int(rng.integers(0, 2**31)),
            )
            total = dc.add(total, _combine(comp, weights))
            for k, v in comp.items():
                comps[k] = comps.get(k, 0.0) + v.item() / config.batch_size
        total = dc.mul(total, 1.0 / config.batch_size)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingDiverged(it, comps)
        trace.append(value)
        dc.backward(total)
        for name in sorted(student.params):
            p = student.params[name]
            g = p.grad if p.grad is not None else 0.0
            velocity[name] = config.momentum * velocity[name] - lr * (
                g + config.weight_decay * p.values
            )
            p.values += velocity[name]
    return trace


def evaluate_model(model, scenes, seen_classes, with_masks=False):
    """mAP reports of a model over fully annotated test scenes."""
    detections, gts = [], []
    for image_id, scene in enumerate(scenes):
        detections.extend(detect(model, scene.cells, image_id=image_id))
        for o in scene.objects:
            if o.class_id in seen_classes:
                gts.append(GroundTruthObject(image_id, o.class_id, o.box, o.mask))
    box_report = map_suite([replace_mask(d, None) for d in detections], gts, "box@0.5")
    mask_report = None
    if with_masks:
        mask_report = map_suite([d for d in detections if d.mask is not None], gts, "mask@[.5:.95]")
    return box_report, mask_report


def replace_mask(det, mask):
    from .evalmetrics import Detection

    return Detection(det.image_id, det.class_id, det.box, det.score, mask)


def run_experiment(schedule, method, corpus, config, det_config=None, step_callback=None,
                   base_weights=None):
    """Train through every schedule step and evaluate after each one."""
    missing = set(corpus_classes(corpus)) - set(schedule.all_classes)
    if missing:
        raise ProtocolError(f"schedule does not cover corpus classes {sorted(missing)}")
    det_config = det_config or DetectorConfig(
        grid=corpus.grid, feat_dim=corpus.feat_dim
    )
    model = ToyDetector(det_config, schedule.new_classes(1), seed=config.seed)
    result = ExperimentResult(method=method, schedule=schedule, seed=config.seed)
    all_map_history, avg_history = [], []
    for t in range(1, schedule.num_steps + 1):
        weights = method_weights(method, schedule, t, base=base_weights)
        weights = replace(
            weights,
            tau=config.tau,
            mask_distill=config.mask_distill and det_config.with_masks and t > 1,
            rpn_printed_gates=config.rpn_printed_gates,
        )
        teacher = None
        if t > 1:
            if weights.uses_teacher:
                teacher = freeze_teacher(model)
            model = expand_head(model, schedule.new_classes(t), seed=config.seed + 7919 * t)
        dataset = build_step_dataset(corpus, schedule, t)
        lr = config.lr_first if t == 1 else config.lr_incremental
        try:
            trace = run_step(model, teacher, dataset, schedule.step_view(t), weights, config, lr)
        except TrainingDiverged as err:
            raise ProtocolError(f"step {t} diverged: {err}") from err
        box_report, mask_report = evaluate_model(
            model, corpus.test, schedule.seen_classes(t), with_masks=det_config.with_masks
        )
        all_map_history.append(box_report.all_map)
        aggregate(box_report, schedule, t, all_map_history.copy(), None)
        avg_history.append(box_report.avg)
        box_report.avg_s_alt = float(np.mean([v for v in avg_history if v is not None]))
        if mask_report is not None:
            aggregate(mask_report, schedule, t)
        step = StepResult(
            step=t,
            classes=schedule.new_classes(t),
            final_loss=trace[-1] if trace else float("nan"),
            box_report=box_report,
            mask_report=mask_report,
        )
        result.steps.append(step)
        if step_callback is not None:
            step_callback(model, step)
    return result


def corpus_classes(corpus):
    seen = set()
    for scene in corpus.train + corpus.test:
        for o in scene.objects:
            seen.add(o.class_id)
    return sorted(seen)
