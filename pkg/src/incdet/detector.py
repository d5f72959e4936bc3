"""Desk-scale two-stage detector over grid images.

Images are G x G grids of feature cells instead of RGB pixels: a shared
per-cell MLP stands in for the backbone, anchors are pooled over their cell
footprint for the RPN, and RoI features are average-pooled cells plus box
geometry. The structure (features -> RPN -> proposals -> class/box/mask head)
is the one the incremental losses need; nothing more.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from . import kernels
from .losses import HeadOutputs, RoiBatch, RpnOutputs

CHECKPOINT_FORMAT_VERSION = 1


class DetectorError(Exception):
    pass


@dataclass
class DetectorConfig:
    grid: int = 16
    feat_dim: int = 8
    embed_dim: int = 16
    rpn_hidden: int = 16
    head_hidden: int = 64
    anchor_scales: tuple = (2, 3, 4, 5, (4, 2), (2, 4))
    num_proposals: int = 48
    proposal_nms_iou: float = 0.5
    roi_pos_iou: float = 0.5
    roi_reg_iou: float = 0.3
    rois_per_image: int = 32
    roi_pos_fraction: float = 0.25
    rpn_samples: int = 32
    rpn_pos_fraction: float = 0.5
    rpn_neg_iou: float = 0.3
    mask_size: int = 14
    with_masks: bool = False
    score_floor: float = 0.05
    max_detections: int = 100


# ---------------------------------------------------------------------------
# anchors and box coding

_ANCHOR_CACHE = {}


def anchor_set(config):
    """Fixed anchors (A, 4) and their 2x2 bin pooling matrices, each (A, G^2)."""
    key = (config.grid, tuple(config.anchor_scales))
    if key not in _ANCHOR_CACHE:
        g = config.grid
        shapes = [(s, s) if np.isscalar(s) else tuple(s) for s in config.anchor_scales]
        boxes = []
        for i in range(g):
            for j in range(g):
                # anchors share the cell's top-left corner so integer-aligned
                # object boxes have an exactly matching anchor at their scale
                for w, h in shapes:
                    boxes.append([j, i, min(j + w, g), min(i + h, g)])
        boxes = np.asarray(boxes, dtype=np.float64)
        pools = [_pool_rows(q, g) for q in _bin_boxes(boxes)]
        _ANCHOR_CACHE[key] = (boxes, pools)
    return _ANCHOR_CACHE[key]


def _bin_boxes(boxes):
    """The four quadrant sub-boxes of (N, 4) boxes; shift-sensitive regions."""
    x0, y0, x1, y1 = boxes.T
    mx = (x0 + x1) / 2.0
    my = (y0 + y1) / 2.0
    return (
        np.stack([x0, y0, mx, my], axis=1),
        np.stack([mx, y0, x1, my], axis=1),
        np.stack([x0, my, mx, y1], axis=1),
        np.stack([mx, my, x1, y1], axis=1),
    )


def _pool_row(box, g):
    """Average-pooling weights over cells whose centers fall inside the box."""
    return _pool_rows(np.asarray(box)[None, :], g)[0]


def _pool_rows(boxes, g):
    """Vectorized _pool_row: (N, 4) boxes -> (N, G^2) weight rows."""
    centers = np.arange(g) + 0.5
    in_x = (centers >= boxes[:, 0:1]) & (centers < boxes[:, 2:3])
    in_y = (centers >= boxes[:, 1:2]) & (centers < boxes[:, 3:4])
    member = (in_y[:, :, None] & in_x[:, None, :]).reshape(len(boxes), g * g)
    rows = member.astype(np.float64)
    empty = ~member.any(axis=1)
    if empty.any():
        cy = np.clip(((boxes[empty, 1] + boxes[empty, 3]) / 2.0).astype(int), 0, g - 1)
        cx = np.clip(((boxes[empty, 0] + boxes[empty, 2]) / 2.0).astype(int), 0, g - 1)
        rows[np.where(empty)[0], cy * g + cx] = 1.0
    return rows / rows.sum(axis=1, keepdims=True)


def _center_boxes(boxes):
    """Central half of each box; robust to objects that do not fill their bbox."""
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return np.stack(
        [
            boxes[:, 0] + w / 4.0,
            boxes[:, 1] + h / 4.0,
            boxes[:, 2] - w / 4.0,
            boxes[:, 3] - h / 4.0,
        ],
        axis=1,
    )


def _context_boxes(boxes, grid):
    """Boxes grown by half their size plus one cell per side; regression context."""
    gx = (boxes[:, 2] - boxes[:, 0]) / 2.0 + 1.0
    gy = (boxes[:, 3] - boxes[:, 1]) / 2.0 + 1.0
    return np.stack(
        [
            np.maximum(boxes[:, 0] - gx, 0.0),
            np.maximum(boxes[:, 1] - gy, 0.0),
            np.minimum(boxes[:, 2] + gx, grid),
            np.minimum(boxes[:, 3] + gy, grid),
        ],
        axis=1,
    )


def encode_deltas(ref_boxes, gt_boxes):
    """Standard center/size log-delta encoding of gt relative to reference."""
    ref_boxes = np.atleast_2d(ref_boxes)
    gt_boxes = np.atleast_2d(gt_boxes)
    rw = ref_boxes[:, 2] - ref_boxes[:, 0]
    rh = ref_boxes[:, 3] - ref_boxes[:, 1]
    rx = ref_boxes[:, 0] + rw / 2.0
    ry = ref_boxes[:, 1] + rh / 2.0
    gw = gt_boxes[:, 2] - gt_boxes[:, 0]
    gh = gt_boxes[:, 3] - gt_boxes[:, 1]
    gx = gt_boxes[:, 0] + gw / 2.0
    gy = gt_boxes[:, 1] + gh / 2.0
    return np.stack(
        [(gx - rx) / rw, (gy - ry) / rh, np.log(gw / rw), np.log(gh / rh)], axis=1
    )


def decode_deltas(ref_boxes, deltas, grid):
    ref_boxes = np.atleast_2d(ref_boxes)
    deltas = np.clip(np.atleast_2d(deltas), -4.0, 4.0)
    rw = ref_boxes[:, 2] - ref_boxes[:, 0]
    rh = ref_boxes[:, 3] - ref_boxes[:, 1]
    rx = ref_boxes[:, 0] + rw / 2.0
    ry = ref_boxes[:, 1] + rh / 2.0
    cx = rx + deltas[:, 0] * rw
    cy = ry + deltas[:, 1] * rh
    w = rw * np.exp(deltas[:, 2])
    h = rh * np.exp(deltas[:, 3])
    out = np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, grid)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, grid)
    return out


# ---------------------------------------------------------------------------
# model


class ToyDetector:
    """Feature extractor + RPN + class/box(/mask) head with a class registry."""

    def __init__(self, config, class_ids, seed=0):
        self.config = config
        self.class_ids = tuple(int(c) for c in class_ids)
        self.frozen = False
        rng = np.random.default_rng(seed)
        c = config
        k = len(self.class_ids)
        self.params = {}
        self._add("fe_w1", rng.normal(0, 0.3, (c.feat_dim, c.embed_dim)))
        self._add("fe_b1", np.zeros(c.embed_dim))
        self._add("fe_w2", rng.normal(0, 0.3, (c.embed_dim, c.embed_dim)))
        self._add("fe_b2", np.zeros(c.embed_dim))
        d = c.embed_dim + c.feat_dim  # learned embedding + raw channel skip
        self._add("rpn_w1", rng.normal(0, 0.3, (4 * d, c.rpn_hidden)))
        self._add("rpn_b1", np.zeros(c.rpn_hidden))
        self._add("rpn_w2", rng.normal(0, 0.1, (c.rpn_hidden, 5)))
        self._add("rpn_b2", np.zeros(5))
        head_in = 6 * d + 4  # 2x2 bins + center + context pools + geometry
        self._add("head_w1", rng.normal(0, 0.3, (head_in, c.head_hidden)))
        self._add("head_b1", np.zeros(c.head_hidden))
        self._add("cls_w", rng.normal(0, 0.1, (c.head_hidden, k + 1)))
        self._add("cls_b", np.zeros(k + 1))
        self._add("box_w", rng.normal(0, 0.01, (c.head_hidden, 4 * k)))
        self._add("box_b", np.zeros(4 * k))
        if c.with_masks:
            m = c.mask_size
            self._add("mask_w", rng.normal(0, 0.05, (c.head_hidden, k * m * m)))
            self._add("mask_b", np.zeros(k * m * m))

    def _add(self, name, values):
        self.params[name] = dc.Tensor(values, requires_grad=True)

    @property
    def num_classes(self):
        return len(self.class_ids)

    def parameters(self):
        return self.params

    # forward passes -------------------------------------------------------

    def forward_features(self, cells):
        c = self.config
        flat = dc.Tensor(np.asarray(cells, dtype=np.float64).reshape(-1, c.feat_dim))
        if flat.shape[0] != c.grid * c.grid or flat.shape[1] != c.feat_dim:
            raise DetectorError(
                f"image shape {np.asarray(cells).shape} does not match grid "
                f"{c.grid}x{c.grid}x{c.feat_dim}"
            )
        h = dc.relu(dc.add_bias(dc.matmul(flat, self.params["fe_w1"]), self.params["fe_b1"]))
        embed = dc.add_bias(dc.matmul(h, self.params["fe_w2"]), self.params["fe_b2"])
        # keep the raw channels alongside the learned embedding: pooled raw
        # channel means are the cleanest class evidence available
        return dc.concat([embed, flat], axis=1)

    def forward_rpn(self, feats):
        _, pools = anchor_set(self.config)
        anchor_feats = dc.concat([dc.matmul(dc.constant(p), feats) for p in pools], axis=1)
        h = dc.relu(dc.add_bias(dc.matmul(anchor_feats, self.params["rpn_w1"]), self.params["rpn_b1"]))
        out = dc.add_bias(dc.matmul(h, self.params["rpn_w2"]), self.params["rpn_b2"])
        scores = dc.sigmoid(dc.reshape(dc.take(out, [0], axis=1), (-1,)))
        deltas = dc.take(out, [1, 2, 3, 4], axis=1)
        return RpnOutputs(scores=scores, deltas=deltas)

    def propose(self, rpn_out):
        """Top-K anchors by objectness after NMS; geometry is detached.

        Proposals are the anchors themselves: the anchor set is dense enough
        that score-ranked NMS covers every object, and the second-stage head
        does the box refinement.
        """
        c = self.config
        anchors, _ = anchor_set(c)
        keep = kernels.nms_keep(anchors, rpn_out.scores.values, c.proposal_nms_iou)
        return anchors[keep[: c.num_proposals]].copy()

    def forward_head(self, feats, rois):
        c = self.config
        rois = np.atleast_2d(np.asarray(rois, dtype=np.float64))
        region_boxes = list(_bin_boxes(rois)) + [
            _center_boxes(rois),
            _context_boxes(rois, c.grid),
        ]
        pooled = dc.concat(
            [dc.matmul(dc.constant(_pool_rows(b, c.grid)), feats) for b in region_boxes],
            axis=1,
        )
        geom = np.stack(
            [
                (rois[:, 0] + rois[:, 2]) / (2.0 * c.grid),
                (rois[:, 1] + rois[:, 3]) / (2.0 * c.grid),
                (rois[:, 2] - rois[:, 0]) / c.grid,
                (rois[:, 3] - rois[:, 1]) / c.grid,
            ],
            axis=1,
        )
        x = dc.concat([pooled, dc.constant(geom)], axis=1)
        h = dc.relu(dc.add_bias(dc.matmul(x, self.params["head_w1"]), self.params["head_b1"]))
        logits = dc.add_bias(dc.matmul(h, self.params["cls_w"]), self.params["cls_b"])
        probs = dc.softmax(logits, axis=1)
        boxes = dc.add_bias(dc.matmul(h, self.params["box_w"]), self.params["box_b"])
        masks = None
        if c.with_masks:
            m = c.mask_size
            raw = dc.add_bias(dc.matmul(h, self.params["mask_w"]), self.params["mask_b"])
            masks = dc.sigmoid(dc.reshape(raw, (len(rois), self.num_classes, m, m)))
        return HeadOutputs(class_ids=self.class_ids, probs=probs, boxes=boxes, masks=masks)

    def forward(self, cells):
        feats = self.forward_features(cells)
        rpn_out = self.forward_rpn(feats)
        proposals = self.propose(rpn_out)
        head = self.forward_head(feats, proposals) if len(proposals) else None
        return rpn_out, proposals, head


# ---------------------------------------------------------------------------
# matching / sampling


def crop_mask_to_roi(mask, roi, out_size):
    """Nearest-neighbour resample of the grid mask restricted to the RoI box."""
    g = mask.shape[0]
    x0, y0, x1, y1 = roi
    w = max(x1 - x0, 1e-6)
    h = max(y1 - y0, 1e-6)
    ys = np.clip((y0 + (np.arange(out_size) + 0.5) * h / out_size).astype(int), 0, g - 1)
    xs = np.clip((x0 + (np.arange(out_size) + 0.5) * w / out_size).astype(int), 0, g - 1)
    return mask[np.ix_(ys, xs)].astype(np.float64)


def match_and_sample(proposals, ground_truth, config, seed):
    """Match proposals to annotations at IoU >= threshold and sample a RoI batch.

    ground_truth: list of SceneObject-like items (class_id, box, mask).
    Deterministic given (proposals, ground_truth, seed).
    """
    proposals = np.atleast_2d(np.asarray(proposals, dtype=np.float64))
    n = len(proposals)
    labels = np.full(n, -1, dtype=np.int64)
    z = np.zeros(n, dtype=np.int64)
    box_targets = np.zeros((n, 4), dtype=np.float64)
    mask_targets = None
    if config.with_masks:
        mask_targets = np.zeros((n, config.mask_size, config.mask_size), dtype=np.float64)
    reg_labels = np.full(n, -1, dtype=np.int64)
    if ground_truth:
        gt_boxes = np.stack([np.asarray(o.box, dtype=np.float64) for o in ground_truth])
        ious = kernels.box_iou_matrix(proposals, gt_boxes)
        best_gt = np.argmax(ious, axis=1)
        best_iou = ious[np.arange(n), best_gt]
        pos = best_iou >= config.roi_pos_iou
        z[pos] = 1
        for i in np.where(best_iou >= config.roi_reg_iou)[0]:
            o = ground_truth[best_gt[i]]
            reg_labels[i] = o.class_id
            box_targets[i] = encode_deltas(proposals[i], o.box)[0]
            if not pos[i]:
                continue
            labels[i] = o.class_id
            if config.with_masks and o.mask is not None:
                mask_targets[i] = crop_mask_to_roi(o.mask, proposals[i], config.mask_size)

    rng = np.random.default_rng(seed)
    pos_idx = np.where(z == 1)[0]
    max_pos = int(config.rois_per_image * config.roi_pos_fraction)
    take_pos = rng.permutation(pos_idx)[:max_pos]
    budget = config.rois_per_image - len(take_pos)
    # negatives that still overlap an object are the ones the classifier must
    # learn to reject; fill from them first, then from easy background
    if ground_truth:
        hard = np.where((z == 0) & (best_iou >= 0.1))[0]
        easy = np.where((z == 0) & (best_iou < 0.1))[0]
    else:
        hard = np.zeros(0, dtype=np.intp)
        easy = np.where(z == 0)[0]
    take_hard = rng.permutation(hard)[: budget // 2]
    take_easy = rng.permutation(easy)[: budget - len(take_hard)]
    take_neg = np.concatenate([take_hard, take_easy])
    sel = np.concatenate([np.sort(take_pos), np.sort(take_neg)]).astype(np.intp)
    return RoiBatch(
        rois=proposals[sel],
        z=z[sel],
        labels=labels[sel],
        box_targets=box_targets[sel],
        mask_targets=None if mask_targets is None else mask_targets[sel],
        reg_labels=reg_labels[sel],
    )


def rpn_targets(ground_truth, config, seed):
    """Sampled anchor indices with objectness targets and positive delta targets."""
    anchors, _ = anchor_set(config)
    a = len(anchors)
    rng = np.random.default_rng(seed)
    if not ground_truth:
        idx = np.sort(rng.permutation(a)[: config.rpn_samples])
        return idx, np.zeros(len(idx)), np.zeros(0, dtype=np.intp), np.zeros((0, 4))
    gt_boxes = np.stack([np.asarray(o.box, dtype=np.float64) for o in ground_truth])
    ious = kernels.box_iou_matrix(anchors, gt_boxes)
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(a), best_gt]
    pos_mask = best_iou >= config.roi_pos_iou
    pos_mask[np.argmax(ious, axis=0)] = True  # best anchor per gt is always positive
    neg_mask = best_iou < config.rpn_neg_iou
    max_pos = int(config.rpn_samples * config.rpn_pos_fraction)
    pos_sel = np.sort(rng.permutation(np.where(pos_mask)[0])[:max_pos])
    neg_sel = np.sort(
        rng.permutation(np.where(neg_mask)[0])[: config.rpn_samples - len(pos_sel)]
    )
    idx = np.concatenate([pos_sel, neg_sel]).astype(np.intp)
    cls_targets = np.concatenate([np.ones(len(pos_sel)), np.zeros(len(neg_sel))])
    delta_targets = encode_deltas(anchors[pos_sel], gt_boxes[best_gt[pos_sel]])
    return idx, cls_targets, pos_sel.astype(np.intp), delta_targets


# ---------------------------------------------------------------------------
# head expansion / freezing / checkpoints


def expand_head(model, new_classes, seed=0):
    """Widen classification/box/mask outputs for new classes.

    Existing parameter values (including the background column, which stays at
    index 0) are preserved bit-for-bit; new columns get seeded low-variance noise.
    """
    new_classes = tuple(int(c) for c in new_classes)
    overlap = set(new_classes) & set(model.class_ids)
    if overlap:
        raise DetectorError(f"classes already registered: {sorted(overlap)}")
    if not new_classes:
        return copy.deepcopy(model)
    out = copy.deepcopy(model)
    out.class_ids = model.class_ids + new_classes
    rng = np.random.default_rng(seed)
    h = model.config.head_hidden
    n_new = len(new_classes)
    out.params["cls_w"] = _widen(model.params["cls_w"], rng.normal(0, 0.01, (h, n_new)))
    out.params["cls_b"] = _widen(model.params["cls_b"], np.zeros(n_new))
    out.params["box_w"] = _widen(model.params["box_w"], rng.normal(0, 0.01, (h, 4 * n_new)))
    out.params["box_b"] = _widen(model.params["box_b"], np.zeros(4 * n_new))
    if model.config.with_masks:
        m = model.config.mask_size
        out.params["mask_w"] = _widen(
            model.params["mask_w"], rng.normal(0, 0.01, (h, n_new * m * m))
        )
        out.params["mask_b"] = _widen(model.params["mask_b"], np.zeros(n_new * m * m))
    return out


def _widen(param, extra):
    values = np.concatenate([param.values, extra], axis=-1)
    return dc.Tensor(values, requires_grad=param.requires_grad)


def freeze_teacher(model):
    """Deep copy with gradient tracking disabled everywhere."""
    teacher = copy.deepcopy(model)
    teacher.frozen = True
    for t in teacher.params.values():
        t.requires_grad = False
        t.grad = None
    return teacher


def save_checkpoint(model, path):
    arrays = {f"param_{k}": v.values for k, v in model.params.items()}
    cfg = model.config
    np.savez(
        path,
        version=np.int64(CHECKPOINT_FORMAT_VERSION),
        class_ids=np.asarray(model.class_ids, dtype=np.int64),
        config_ints=np.array(
            [
                cfg.grid,
                cfg.feat_dim,
                cfg.embed_dim,
                cfg.rpn_hidden,
                cfg.head_hidden,
                cfg.num_proposals,
                cfg.rois_per_image,
                cfg.rpn_samples,
                cfg.mask_size,
                int(cfg.with_masks),
                cfg.max_detections,
            ],
            dtype=np.int64,
        ),
        config_floats=np.array(
            [
                cfg.proposal_nms_iou,
                cfg.roi_pos_iou,
                cfg.roi_pos_fraction,
                cfg.rpn_pos_fraction,
                cfg.rpn_neg_iou,
                cfg.score_floor,
            ],
            dtype=np.float64,
        ),
        anchor_scales=np.asarray(
            [(s, s) if np.isscalar(s) else tuple(s) for s in cfg.anchor_scales],
            dtype=np.int64,
        ),
        **arrays,
    )


def load_checkpoint(path):
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise DetectorError(f"unsupported checkpoint version {version}")
        ci = [int(v) for v in data["config_ints"]]
        cf = [float(v) for v in data["config_floats"]]
        cfg = DetectorConfig(
            grid=ci[0],
            feat_dim=ci[1],
            embed_dim=ci[2],
            rpn_hidden=ci[3],
            head_hidden=ci[4],
            num_proposals=ci[5],
            rois_per_image=ci[6],
            rpn_samples=ci[7],
            mask_size=ci[8],
            with_masks=bool(ci[9]),
            max_detections=ci[10],
            proposal_nms_iou=cf[0],
            roi_pos_iou=cf[1],
            roi_pos_fraction=cf[2],
            rpn_pos_fraction=cf[3],
            rpn_neg_iou=cf[4],
            score_floor=cf[5],
            anchor_scales=tuple(
                int(w) if w == h else (int(w), int(h))
                for w, h in data["anchor_scales"]
            ),
        )
        model = ToyDetector(cfg, [int(c) for c in data["class_ids"]], seed=0)
        for key in list(model.params):
            model.params[key] = dc.Tensor(data[f"param_{key}"].copy(), requires_grad=True)
    return model


# ---------------------------------------------------------------------------
# inference


def _decode_candidates(model, proposals, head):
    """Per-class decoded boxes above the score floor, snapped to cell edges.

    Snapping is sound here: scenes are cell grids, so fractional box edges
    are regression noise, not signal.
    """
    c = model.config
    probs = head.probs.values
    boxes = head.boxes.values
    out = []
    for i, roi in enumerate(proposals):
        for k, cid in enumerate(model.class_ids):
            score = probs[i, 1 + k]
            if score < c.score_floor:
                continue
            box = np.round(decode_deltas(roi, boxes[i, 4 * k : 4 * k + 4], c.grid)[0])
            if box[2] - box[0] <= 1e-3 or box[3] - box[1] <= 1e-3:
                continue
            out.append((k, cid, float(score), box))
    return out


def detect(model, cells, image_id=0):
    """Run the detector on one image and return thresholded, NMS-filtered detections.

    Runs the head twice: candidate boxes from the first pass are re-scored and
    re-regressed on their own footprint, which demotes badly placed boxes.
    """
    from .evalmetrics import Detection

    c = model.config
    feats = model.forward_features(cells)
    proposals = model.propose(model.forward_rpn(feats))
    if not len(proposals):
        return []
    first = _decode_candidates(model, proposals, model.forward_head(feats, proposals))
    if not first:
        return []
    cand = np.stack([box for _, _, _, box in first])
    head = model.forward_head(feats, cand)
    masks = head.masks.values if head.masks is not None else None
    dets = []
    for i, (k, cid, _, _) in enumerate(first):
        score = head.probs.values[i, 1 + k]
        if score < c.score_floor:
            continue
        box = np.round(decode_deltas(cand[i], head.boxes.values[i, 4 * k : 4 * k + 4], c.grid)[0])
        if box[2] - box[0] <= 1e-3 or box[3] - box[1] <= 1e-3:
            continue
        mask = None
        if masks is not None:
            mask = _paste_mask(masks[i, k], box, c.grid)
            if not mask.any():
                continue
        dets.append(Detection(image_id, cid, box, float(score), mask))
    dets = _soft_nms(dets)
    return dets[: c.max_detections]


def _soft_nms(dets, sigma=0.4, floor=0.01):
    """Per-class Gaussian score decay instead of hard suppression.

    A displaced high-scoring box then demotes, rather than deletes, the
    aligned one, which matters under interpolated AP at high recall.
    """
    from .evalmetrics import Detection

    out = []
    by_class = {}
    for d in dets:
        by_class.setdefault(d.class_id, []).append([d, d.score])
    for _, group in sorted(by_class.items()):
        while group:
            i = max(range(len(group)), key=lambda j: group[j][1])
            d, score = group.pop(i)
            if score < floor:
                continue
            out.append(Detection(d.image_id, d.class_id, d.box, float(score), d.mask))
            if group:
                ious = kernels.box_iou_matrix(
                    d.box[None, :], np.stack([g[0].box for g in group])
                )[0]
                for g, iou in zip(group, ious):
                    g[1] *= np.exp(-iou * iou / sigma)
    out.sort(key=lambda d: -d.score)
    return out


def _paste_mask(roi_mask, box, grid):
    """Nearest-neighbour paste of an m x m sigmoid mask into the image grid."""
    out = np.zeros((grid, grid), dtype=bool)
    x0, y0, x1, y1 = box
    m = roi_mask.shape[0]
    ys = np.arange(int(np.floor(y0)), int(np.ceil(y1)))
    xs = np.arange(int(np.floor(x0)), int(np.ceil(x1)))
    ys = ys[(ys >= 0) & (ys < grid)]
    xs = xs[(xs >= 0) & (xs < grid)]
    for y in ys:
        my = int(np.clip((y + 0.5 - y0) / max(y1 - y0, 1e-6) * m, 0, m - 1))
        for x in xs:
            mx = int(np.clip((x + 0.5 - x0) / max(x1 - x0, 1e-6) * m, 0, m - 1))
            out[y, x] = roi_mask[my, mx] >= 0.5
    return out
