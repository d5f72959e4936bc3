import subprocess
import sys

import numpy as np

from incdet import kernels


def _random_boxes(rng, n, extent=16.0):
    x0 = rng.uniform(0, extent - 1, size=n)
    y0 = rng.uniform(0, extent - 1, size=n)
    w = rng.uniform(0.5, 5.0, size=n)
    h = rng.uniform(0.5, 5.0, size=n)
    return np.stack([x0, y0, np.minimum(x0 + w, extent), np.minimum(y0 + h, extent)], axis=1)


def test_box_iou_matrix_known_values():
    a = np.array([[0.0, 0.0, 1.0, 1.0]])
    b = np.array([[0.0, 0.0, 1.0, 1.0], [0.5, 0.0, 1.5, 1.0], [2.0, 2.0, 3.0, 3.0]])
    out = kernels.box_iou_matrix(a, b)
    np.testing.assert_allclose(out[0], [1.0, 1.0 / 3.0, 0.0], atol=1e-12)


def test_backend_parity_against_numpy_reference():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = _random_boxes(rng, int(rng.integers(1, 12)))
        b = _random_boxes(rng, int(rng.integers(1, 12)))
        np.testing.assert_allclose(
            kernels.box_iou_matrix(a, b), kernels._box_iou_matrix_np(a, b), atol=1e-12
        )
        scores = rng.uniform(size=len(a))
        np.testing.assert_array_equal(
            kernels.nms_keep(a, scores, 0.5), kernels._nms_keep_np(a, scores, 0.5)
        )
        masks_a = rng.integers(0, 2, size=(len(a), 8, 8)).astype(np.uint8)
        masks_b = rng.integers(0, 2, size=(len(a), 8, 8)).astype(np.uint8)
        np.testing.assert_allclose(
            kernels.mask_iou_pairs(masks_a, masks_b),
            kernels._mask_iou_pairs_np(masks_a, masks_b),
            atol=1e-12,
        )


def test_nms_keeps_highest_of_identical_pair():
    boxes = np.array([[0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.0]])
    keep = kernels.nms_keep(boxes, np.array([0.8, 0.9]), 0.5)
    np.testing.assert_array_equal(keep, [1])


def test_nms_tie_broken_by_insertion_order():
    boxes = np.array([[0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.0]])
    keep = kernels.nms_keep(boxes, np.array([0.9, 0.9]), 0.5)
    np.testing.assert_array_equal(keep, [0])


def test_numpy_fallback_selected_by_env_flag():
    code = "import incdet.kernels as k; print(k.BACKEND)"
    out = subprocess.run(
        [sys.executable, "-c", code],
        capture_output=True, text=True, env={"INCDET_NO_NUMBA": "1", "PATH": "/usr/bin:/bin"},
    )
    assert out.stdout.strip() == "numpy", out.stderr
