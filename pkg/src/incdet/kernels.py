"""Geometry kernels: pairwise box IoU, greedy NMS, batched mask IoU.

Each kernel has a numba ``@njit`` build and a pure-numpy fallback. The numpy
path is selected by setting ``INCDET_NO_NUMBA=1`` in the environment before
import; ``incdet.kernels.BACKEND`` reports which one is active. Both paths are
exercised in the test suite and compared in ``benchmarks/bench_kernels.py``.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("INCDET_NO_NUMBA", "") not in ("", "0")

# ---------------------------------------------------------------------------
# numpy reference implementations


def _box_iou_matrix_np(boxes_a, boxes_b):
    ax0, ay0, ax1, ay1 = boxes_a[:, 0], boxes_a[:, 1], boxes_a[:, 2], boxes_a[:, 3]
    bx0, by0, bx1, by1 = boxes_b[:, 0], boxes_b[:, 1], boxes_b[:, 2], boxes_b[:, 3]
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    ix0 = np.maximum(ax0[:, None], bx0[None, :])
    iy0 = np.maximum(ay0[:, None], by0[None, :])
    ix1 = np.minimum(ax1[:, None], bx1[None, :])
    iy1 = np.minimum(ay1[:, None], by1[None, :])
    inter = np.maximum(ix1 - ix0, 0.0) * np.maximum(iy1 - iy0, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0.0, inter / np.maximum(union, 1e-300), 0.0)


def _nms_keep_np(boxes, scores, iou_threshold):
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(idx)
        if len(order) > 1:
            ious = _box_iou_matrix_np(boxes[idx : idx + 1], boxes).reshape(-1)
            suppressed |= ious > iou_threshold
            suppressed[idx] = True
    return np.asarray(keep, dtype=np.int64)


def _mask_iou_pairs_np(masks_a, masks_b):
    a = masks_a.reshape(masks_a.shape[0], -1).astype(bool)
    b = masks_b.reshape(masks_b.shape[0], -1).astype(bool)
    inter = np.logical_and(a, b).sum(axis=1).astype(np.float64)
    union = np.logical_or(a, b).sum(axis=1).astype(np.float64)
    return np.where(union > 0, inter / np.maximum(union, 1.0), 0.0)


# ---------------------------------------------------------------------------
# numba builds

if not _DISABLE:
    try:
        from numba import njit

        @njit(cache=True)
        def _box_iou_matrix_nb(boxes_a, boxes_b):
            n, m = boxes_a.shape[0], boxes_b.shape[0]
            out = np.zeros((n, m), dtype=np.float64)
            for i in range(n):
                ax0, ay0, ax1, ay1 = boxes_a[i, 0], boxes_a[i, 1], boxes_a[i, 2], boxes_a[i, 3]
                area_a = (ax1 - ax0) * (ay1 - ay0)
                for j in range(m):
                    ix0 = max(ax0, boxes_b[j, 0])
                    iy0 = max(ay0, boxes_b[j, 1])
                    ix1 = min(ax1, boxes_b[j, 2])
                    iy1 = min(ay1, boxes_b[j, 3])
                    iw = ix1 - ix0
                    ih = iy1 - iy0
                    if iw <= 0.0 or ih <= 0.0:
                        continue
                    inter = iw * ih
                    area_b = (boxes_b[j, 2] - boxes_b[j, 0]) * (boxes_b[j, 3] - boxes_b[j, 1])
                    union = area_a + area_b - inter
                    if union > 0.0:
                        out[i, j] = inter / union
            return out

        @njit(cache=True)
        def _nms_keep_nb(boxes, scores, iou_threshold):
            n = boxes.shape[0]
            order = np.argsort(-scores, kind="mergesort")
            suppressed = np.zeros(n, dtype=np.bool_)
            keep = np.empty(n, dtype=np.int64)
            count = 0
            for oi in range(n):
                i = order[oi]
                if suppressed[i]:
                    continue
                keep[count] = i
                count += 1
                ax0, ay0, ax1, ay1 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
                area_a = (ax1 - ax0) * (ay1 - ay0)
                for oj in range(oi + 1, n):
                    j = order[oj]
                    if suppressed[j]:
                        continue
                    ix0 = max(ax0, boxes[j, 0])
                    iy0 = max(ay0, boxes[j, 1])
                    ix1 = min(ax1, boxes[j, 2])
                    iy1 = min(ay1, boxes[j, 3])
                    iw = ix1 - ix0
                    ih = iy1 - iy0
                    if iw <= 0.0 or ih <= 0.0:
                        continue
                    inter = iw * ih
                    area_b = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
                    union = area_a + area_b - inter
                    if union > 0.0 and inter / union > iou_threshold:
                        suppressed[j] = True
            return keep[:count]

        @njit(cache=True)
        def _mask_iou_pairs_nb(masks_a, masks_b):
            n = masks_a.shape[0]
            out = np.zeros(n, dtype=np.float64)
            for k in range(n):
                inter = 0
                union = 0
                a = masks_a[k].ravel()
                b = masks_b[k].ravel()
                for p in range(a.shape[0]):
                    av = a[p] != 0
                    bv = b[p] != 0
                    if av and bv:
                        inter += 1
                    if av or bv:
                        union += 1
                if union > 0:
                    out[k] = inter / union
            return out

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _DISABLE = True

if _DISABLE:
    BACKEND = "numpy"


def box_iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU of two (N,4)/(M,4) xyxy box arrays -> (N, M)."""
    boxes_a = np.ascontiguousarray(boxes_a, dtype=np.float64)
    boxes_b = np.ascontiguousarray(boxes_b, dtype=np.float64)
    if boxes_a.size == 0 or boxes_b.size == 0:
        return np.zeros((boxes_a.shape[0], boxes_b.shape[0]), dtype=np.float64)
    if BACKEND == "numba":
        return _box_iou_matrix_nb(boxes_a, boxes_b)
    return _box_iou_matrix_np(boxes_a, boxes_b)


def nms_keep(boxes, scores, iou_threshold):
    """Greedy score-descending suppression; returns kept indices in keep order.

    Ties in score are broken by original index order (stable sort).
    """
    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    if BACKEND == "numba":
        return _nms_keep_nb(boxes, scores, float(iou_threshold))
    return _nms_keep_np(boxes, scores, float(iou_threshold))


def mask_iou_pairs(masks_a, masks_b):
    """Elementwise IoU of two equally shaped stacks of binary masks -> (N,)."""
    masks_a = np.ascontiguousarray(masks_a, dtype=np.uint8)
    masks_b = np.ascontiguousarray(masks_b, dtype=np.uint8)
    if masks_a.shape != masks_b.shape:
        raise ValueError(f"mask stacks differ in shape: {masks_a.shape} vs {masks_b.shape}")
    if masks_a.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    if BACKEND == "numba":
        return _mask_iou_pairs_nb(masks_a, masks_b)
    return _mask_iou_pairs_np(masks_a, masks_b)
