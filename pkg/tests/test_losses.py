import numpy as np
import pytest

from incdet import diffcore as dc
from incdet import losses as L
from fdcheck import assert_grads_close

# class ids used throughout: old = (0, 1), new = (2, 3)
STEP = L.StepView(new_classes=(2, 3), old_classes=(0, 1))
STEP1 = L.StepView(new_classes=(0, 1, 2, 3), old_classes=())


def head(probs, boxes=None, class_ids=(0, 1, 2, 3), masks=None, grad=False):
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    n, k = probs.shape[0], len(class_ids)
    if boxes is None:
        boxes = np.zeros((n, 4 * k))
    return L.HeadOutputs(
        class_ids=tuple(class_ids),
        probs=dc.Tensor(probs, requires_grad=grad),
        boxes=dc.Tensor(np.atleast_2d(boxes), requires_grad=grad),
        masks=None if masks is None else dc.Tensor(masks, requires_grad=grad),
    )


def batch(z, labels, n=None):
    z = np.asarray(z)
    n = n or len(z)
    return L.RoiBatch(
        rois=np.tile([0.0, 0.0, 1.0, 1.0], (n, 1)),
        z=z,
        labels=np.asarray(labels),
        box_targets=np.zeros((n, 4)),
    )


def rand_probs(rng, n, k):
    raw = rng.uniform(0.05, 1.0, size=(n, k))
    return raw / raw.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# standard / unbiased classification


def test_standard_cls_perfect_negative_is_zero():
    h = head([[1.0, 0.0, 0.0, 0.0, 0.0]])
    out = L.standard_cls_loss(h, batch([0], [-1]))
    assert out.item() == pytest.approx(0.0, abs=1e-9)


def test_standard_cls_half_prob_positive():
    h = head([[0.1, 0.5, 0.2, 0.1, 0.1]])
    out = L.standard_cls_loss(h, batch([1], [0]))
    assert out.item() == pytest.approx(0.693147, abs=1e-6)


def test_standard_cls_two_perfect_rois():
    h = head([[0.0, 1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0]])
    out = L.standard_cls_loss(h, batch([1, 0], [0, -1]))
    assert out.item() == pytest.approx(0.0, abs=1e-9)


def test_standard_cls_empty_batch_errors():
    h = head(np.zeros((0, 5)))
    with pytest.raises(L.LossError, match="empty RoI batch"):
        L.standard_cls_loss(h, batch(np.zeros(0, dtype=int), np.zeros(0, dtype=int)))


def test_unbiased_cls_reduces_to_standard_without_old_classes():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        p = rand_probs(rng, n, 5)
        z = rng.integers(0, 2, size=n)
        labels = np.where(z == 1, rng.integers(0, 4, size=n), -1)
        a = L.standard_cls_loss(head(p), batch(z, labels)).item()
        b = L.unbiased_cls_loss(head(p), batch(z, labels), STEP1).item()
        assert abs(a - b) < 1e-12


def test_unbiased_cls_negative_covered_by_old_class():
    h = head([[0.3, 0.7, 0.0, 0.0, 0.0]])
    out = L.unbiased_cls_loss(h, batch([0], [-1]), STEP)
    assert out.item() == pytest.approx(0.0, abs=1e-9)


def test_unbiased_cls_negative_mass_on_new():
    h = head([[0.2, 0.2, 0.1, 0.4, 0.1]])  # b + old = 0.5
    out = L.unbiased_cls_loss(h, batch([0], [-1]), STEP)
    assert out.item() == pytest.approx(0.693147, abs=1e-6)


def test_unbiased_cls_rejects_old_class_positive():
    h = head(rand_probs(np.random.default_rng(0), 1, 5))
    with pytest.raises(L.LossError, match="outside the current step"):
        L.unbiased_cls_loss(h, batch([1], [0]), STEP)


def test_unbiased_cls_negative_monotone_in_covered_mass():
    losses = []
    for covered in (0.2, 0.5, 0.8, 0.99):
        p = np.array([[covered / 2, covered / 2, 0.0, 1 - covered, 0.0]])
        losses.append(L.unbiased_cls_loss(head(p), batch([0], [-1]), STEP).item())
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_unbiased_cls_negative_redistribution_bitwise():
    # dyadic masses keep every partial sum exact
    base = np.array([[0.25, 0.125, 0.125, 0.25, 0.25]])
    moved = np.array([[0.125, 0.25, 0.125, 0.25, 0.25]])  # mass moved b <-> old
    a = L.unbiased_cls_loss(head(base), batch([0], [-1]), STEP).item()
    b = L.unbiased_cls_loss(head(moved), batch([0], [-1]), STEP).item()
    assert a == b


# ---------------------------------------------------------------------------
# distillation variants


def teacher_student(p_t, p_s, boxes_t=None, boxes_s=None):
    t = head(p_t, boxes=boxes_t, class_ids=(0, 1))
    s = head(p_s, boxes=boxes_s, class_ids=(0, 1, 2, 3))
    return t, s


def test_ukd_teacher_one_hot_matched():
    t, s = teacher_student([[0.0, 1.0, 0.0]], [[0.0, 1.0, 0.0, 0.0, 0.0]])
    assert L.unbiased_kd_cls(t, s).item() == pytest.approx(0.0, abs=1e-9)


def test_ukd_background_explained_by_new_classes():
    t = head([[1.0, 0.0, 0.0]], class_ids=(0, 1))
    for split in ([0.2, 0.0, 0.0, 0.5, 0.3], [1.0, 0.0, 0.0, 0.0, 0.0]):
        s = head([split], class_ids=(0, 1, 2, 3))
        assert L.unbiased_kd_cls(t, s).item() == pytest.approx(0.0, abs=1e-9)


def test_ukd_derived_value():
    t = head([[0.6, 0.4]], class_ids=(0,))
    s = head([[0.1, 0.4, 0.5]], class_ids=(0, 1))
    want = 0.5 * (-0.6 * np.log(0.6) - 0.4 * np.log(0.4))
    assert L.unbiased_kd_cls(t, s).item() == pytest.approx(want, abs=1e-6)
    assert want == pytest.approx(0.336506, abs=1e-6)


def test_ukd_class_set_mismatch():
    t = head([[0.5, 0.5]], class_ids=(7,))
    s = head([[0.2, 0.3, 0.5]], class_ids=(0, 1))
    with pytest.raises(L.LossError, match="class-set mismatch"):
        L.unbiased_kd_cls(t, s)


def test_ukd_redistribution_bitwise():
    t = head([[0.5, 0.5]], class_ids=(0,))
    a = head([[0.25, 0.25, 0.25, 0.25]], class_ids=(0, 1, 2))
    b = head([[0.125, 0.25, 0.25, 0.375]], class_ids=(0, 1, 2))  # mass moved b <-> new
    assert L.unbiased_kd_cls(t, a).item() == L.unbiased_kd_cls(t, b).item()


def test_l2_kd_values():
    t, s = teacher_student([[0.6, 0.3, 0.1]], [[0.6, 0.3, 0.1, 0.0, 0.0]])
    assert L.l2_kd_cls(t, s).item() == pytest.approx(0.0, abs=1e-12)
    t2 = head([[0.6, 0.4]], class_ids=(0,))
    s2 = head([[0.1, 0.4, 0.5]], class_ids=(0, 1))
    assert L.l2_kd_cls(t2, s2).item() == pytest.approx(0.125, abs=1e-12)


def test_ce_kd_self_entropy():
    t2 = head([[0.6, 0.4]], class_ids=(0,))
    s2 = head([[0.6, 0.4, 0.0]], class_ids=(0, 1))
    assert L.ce_kd_cls(t2, s2).item() == pytest.approx(0.336506, abs=1e-6)
    t_hot = head([[0.0, 1.0]], class_ids=(0,))
    s_hot = head([[0.0, 1.0, 0.0]], class_ids=(0, 1))
    assert L.ce_kd_cls(t_hot, s_hot).item() == pytest.approx(0.0, abs=1e-9)


def test_ce_kd_exceeds_ukd_when_bg_mass_moves_to_new_class():
    t = head([[0.6, 0.4]], class_ids=(0,))
    s = head([[0.1, 0.4, 0.5]], class_ids=(0, 1))
    assert L.ce_kd_cls(t, s).item() > L.unbiased_kd_cls(t, s).item()


def test_ukd_equals_ce_without_new_classes():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        p_t = rand_probs(rng, n, 3)
        p_s = rand_probs(rng, n, 3)
        t = head(p_t, class_ids=(0, 1))
        s = head(p_s, class_ids=(0, 1))
        assert abs(L.unbiased_kd_cls(t, s).item() - L.ce_kd_cls(t, s).item()) < 1e-12


# ---------------------------------------------------------------------------
# smooth L1 and RCN distillation


def test_smooth_l1_values():
    z = dc.Tensor(np.zeros(4))
    assert L.smooth_l1(z, z).item() == 0.0
    assert L.smooth_l1(dc.Tensor([0.5]), dc.Tensor([0.0])).item() == pytest.approx(0.125)
    assert L.smooth_l1(dc.Tensor([2.0]), dc.Tensor([0.0])).item() == pytest.approx(1.5)


def test_smooth_l1_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        L.smooth_l1(dc.Tensor(np.zeros(3)), dc.Tensor(np.zeros(4)))


def test_rcn_distill_teacher_equals_student():
    p = [[0.5, 0.3, 0.2]]
    t = head(p, boxes=np.ones((1, 8)), class_ids=(0, 1))
    s = head([[0.5, 0.3, 0.2, 0.0, 0.0]], boxes=np.concatenate([np.ones(8), np.zeros(8)])[None],
             class_ids=(0, 1, 2, 3))
    out = L.rcn_distill_loss(t, s, "l2")
    assert out.item() == pytest.approx(0.0, abs=1e-12)


def test_rcn_distill_box_delta():
    p_t = [[0.6, 0.4]]
    t = head(p_t, boxes=np.zeros((1, 4)), class_ids=(0,))
    boxes_s = np.zeros((1, 8))
    boxes_s[0, 1] = 0.5
    s = head([[0.6, 0.4, 0.0]], boxes=boxes_s, class_ids=(0, 1))
    base = L.unbiased_kd_cls(t, s).item()
    out = L.rcn_distill_loss(t, s, "unbiased")
    assert out.item() - base == pytest.approx(0.125 / 4, abs=1e-9)


def test_rcn_distill_none_variant_exact_zero():
    t, s = teacher_student([[0.9, 0.1, 0.0]], [[0.1, 0.1, 0.1, 0.2, 0.5]])
    assert L.rcn_distill_loss(t, s, "none").item() == 0.0


# ---------------------------------------------------------------------------
# RPN distillation


def rpn(scores, deltas=None, grad=False):
    scores = np.asarray(scores, dtype=np.float64)
    if deltas is None:
        deltas = np.zeros((len(scores), 4))
    return L.RpnOutputs(dc.Tensor(scores, requires_grad=grad), dc.Tensor(deltas, requires_grad=grad))


def test_rpn_distill_identical_is_zero():
    t = rpn([0.5, 0.9], np.ones((2, 4)))
    s = rpn([0.5, 0.9], np.ones((2, 4)))
    assert L.rpn_distill_loss(t, s, 0.1).item() == 0.0


def test_rpn_distill_teacher_above_student():
    out = L.rpn_distill_loss(rpn([0.9]), rpn([0.4]), 0.1)
    assert out.item() == pytest.approx(0.5, abs=1e-12)


def test_rpn_distill_student_confident_no_penalty():
    assert L.rpn_distill_loss(rpn([0.3]), rpn([0.9]), 0.1).item() == 0.0


def test_rpn_distill_coord_gate_uses_tau():
    t = rpn([0.6], np.zeros((1, 4)))
    s = rpn([0.55], np.ones((1, 4)))
    # teacher above student but within tau: score term only
    out = L.rpn_distill_loss(t, s, 0.1)
    assert out.item() == pytest.approx(0.05, abs=1e-12)
    # beyond tau: coordinate euclidean distance joins
    s2 = rpn([0.4], np.ones((1, 4)))
    out2 = L.rpn_distill_loss(t, s2, 0.1)
    assert out2.item() == pytest.approx(0.2 + 2.0, abs=1e-12)


def test_rpn_distill_printed_gate_reading():
    # printed reading gates where the student is ahead instead
    out = L.rpn_distill_loss(rpn([0.3]), rpn([0.9]), 0.1, printed_gates=True)
    assert out.item() == pytest.approx(0.6, abs=1e-12)
    assert L.rpn_distill_loss(rpn([0.9]), rpn([0.3]), 0.1, printed_gates=True).item() == 0.0


def test_rpn_distill_anchor_mismatch():
    with pytest.raises(L.LossError, match="anchor count"):
        L.rpn_distill_loss(rpn([0.5, 0.5]), rpn([0.5]), 0.1)


# ---------------------------------------------------------------------------
# mask losses


def test_mask_cls_perfect_prediction_near_zero():
    masks = np.zeros((1, 2, 4, 4))
    masks[0, 1] = 1.0
    tgt = np.ones((1, 4, 4))
    b = batch([1], [1])
    b.mask_targets = tgt
    h = head([[0.0, 0.0, 1.0]], class_ids=(0, 1), masks=masks)
    assert L.mask_cls_loss(h, b).item() == pytest.approx(0.0, abs=1e-9)


def test_mask_cls_uniform_half_is_log2():
    masks = np.full((1, 2, 4, 4), 0.5)
    b = batch([1], [0])
    b.mask_targets = np.random.default_rng(0).integers(0, 2, size=(1, 4, 4)).astype(float)
    h = head([[0.0, 1.0, 0.0]], class_ids=(0, 1), masks=masks)
    assert L.mask_cls_loss(h, b).item() == pytest.approx(np.log(2), abs=1e-9)


def test_mask_cls_inverted_at_clamp_limit():
    masks = np.zeros((1, 1, 2, 2))
    b = batch([1], [0])
    b.mask_targets = np.ones((1, 2, 2))
    h = head([[0.0, 1.0]], class_ids=(0,), masks=masks)
    assert L.mask_cls_loss(h, b).item() == pytest.approx(-np.log(1e-12), rel=1e-6)


def test_mask_cls_no_positives_zero():
    h = head([[1.0, 0.0]], class_ids=(0,), masks=np.full((1, 1, 2, 2), 0.5))
    assert L.mask_cls_loss(h, batch([0], [-1])).item() == 0.0


def test_mask_distill_matching_binary_teacher():
    tm = np.zeros((1, 1, 4, 4))
    tm[0, 0, :2] = 1.0
    t = head([[0.5, 0.5]], class_ids=(0,), masks=tm)
    s = head([[0.5, 0.5, 0.0]], class_ids=(0, 1), masks=np.concatenate([tm, tm], axis=1))
    assert L.mask_distill_loss(t, s).item() == pytest.approx(0.0, abs=1e-9)


def test_mask_distill_uniform_half_is_log2():
    t = head([[0.5, 0.5]], class_ids=(0,), masks=np.full((2, 1, 4, 4), 0.5))
    s = head([[0.5, 0.5, 0.0]] * 2, class_ids=(0, 1), masks=np.full((2, 2, 4, 4), 0.5))
    assert L.mask_distill_loss(t, s).item() == pytest.approx(np.log(2), abs=1e-9)


def test_mask_distill_ignores_new_class_channels():
    rng = np.random.default_rng(8)
    tm = rng.uniform(0.2, 0.8, size=(2, 1, 4, 4))
    t = head([[0.5, 0.5]] * 2, class_ids=(0,), masks=tm)
    sm = np.concatenate([tm, rng.uniform(size=(2, 1, 4, 4))], axis=1)
    s1 = head([[0.5, 0.5, 0.0]] * 2, class_ids=(0, 1), masks=sm)
    sm2 = sm.copy()
    sm2[:, 1:] = rng.uniform(size=(2, 1, 4, 4))
    s2 = head([[0.5, 0.5, 0.0]] * 2, class_ids=(0, 1), masks=sm2)
    assert L.mask_distill_loss(t, s1).item() == L.mask_distill_loss(t, s2).item()


# ---------------------------------------------------------------------------
# total objective


def test_total_objective_weighted_sum():
    w = L.LossWeights(lambda1=1.0, lambda2=0.1)
    out = L.total_objective(dc.constant(2.0), w, rcn_dist=dc.constant(0.3), rpn_dist=dc.constant(0.5))
    assert out.item() == pytest.approx(2.35, abs=1e-12)


def test_total_objective_zero_lambdas():
    w = L.LossWeights(lambda1=0.0, lambda2=0.0, lambda3=0.0)
    out = L.total_objective(dc.constant(1.5), w, rcn_dist=dc.constant(9.0), rpn_dist=dc.constant(9.0))
    assert out.item() == pytest.approx(1.5, abs=1e-12)


def test_total_objective_omitted_terms():
    w = L.LossWeights(lambda1=1.0, lambda2=1.0)
    assert L.total_objective(dc.constant(1.5), w).item() == 1.5


def test_loss_weights_validation():
    with pytest.raises(L.LossError):
        L.LossWeights(lambda1=-1.0)
    with pytest.raises(L.LossError):
        L.LossWeights(cls_variant="bogus")
    with pytest.raises(L.LossError):
        L.LossWeights(rcn_distill_variant="huber")


# ---------------------------------------------------------------------------
# gradient checks (full 100-input sweeps live in test_acceptance)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(55)
    n = 4
    p_s = rand_probs(rng, n, 5)
    p_t = rand_probs(rng, n, 3)
    boxes_s = rng.normal(size=(n, 16)) * 0.4
    boxes_t = rng.normal(size=(n, 8)) * 0.4
    z = np.array([1, 0, 1, 0])
    labels = np.array([2, -1, 3, -1])
    b = batch(z, labels)

    def mk_student(pt, bt=None):
        return L.HeadOutputs((0, 1, 2, 3), pt, dc.Tensor(boxes_s) if bt is None else bt)

    def mk_teacher(pt, bt=None):
        return L.HeadOutputs((0, 1), pt, dc.Tensor(boxes_t) if bt is None else bt)

    assert_grads_close(lambda p: L.standard_cls_loss(mk_student(p), b), [p_s.copy()])
    assert_grads_close(lambda p: L.unbiased_cls_loss(mk_student(p), b, STEP), [p_s.copy()])
    assert_grads_close(lambda p: L.unbiased_kd_cls(mk_teacher(dc.Tensor(p_t)), mk_student(p)), [p_s.copy()])
    assert_grads_close(lambda p: L.l2_kd_cls(mk_teacher(dc.Tensor(p_t)), mk_student(p)), [p_s.copy()])
    assert_grads_close(lambda p: L.ce_kd_cls(mk_teacher(dc.Tensor(p_t)), mk_student(p)), [p_s.copy()])
    assert_grads_close(
        lambda p, bx: L.rcn_distill_loss(mk_teacher(dc.Tensor(p_t)), mk_student(p, bx), "unbiased"),
        [p_s.copy(), boxes_s.copy()],
    )
    assert_grads_close(lambda x: L.smooth_l1(x, dc.Tensor(boxes_t)), [boxes_s[:, :8].copy() + 2.0])

    s_scores = rng.uniform(0.05, 0.95, size=6)
    t_scores = rng.uniform(0.05, 0.95, size=6)
    t_deltas = rng.normal(size=(6, 4))
    s_deltas = t_deltas + rng.normal(size=(6, 4)) * 0.5

    def rpn_loss(ss, sd):
        return L.rpn_distill_loss(
            L.RpnOutputs(dc.Tensor(t_scores), dc.Tensor(t_deltas)), L.RpnOutputs(ss, sd), 0.1
        )

    assert_grads_close(rpn_loss, [s_scores, s_deltas])

    masks_s = rng.uniform(0.1, 0.9, size=(n, 4, 3, 3))
    masks_t = rng.uniform(0.1, 0.9, size=(n, 2, 3, 3))
    bm = batch(z, labels)
    bm.mask_targets = rng.integers(0, 2, size=(n, 3, 3)).astype(float)

    def mask_loss(m):
        h = L.HeadOutputs((0, 1, 2, 3), dc.Tensor(p_s), dc.Tensor(boxes_s), masks=m)
        return L.mask_cls_loss(h, bm)

    assert_grads_close(mask_loss, [masks_s.copy()])

    def mask_dist(m):
        t = L.HeadOutputs((0, 1), dc.Tensor(p_t), dc.Tensor(boxes_t), masks=dc.Tensor(masks_t))
        s = L.HeadOutputs((0, 1, 2, 3), dc.Tensor(p_s), dc.Tensor(boxes_s), masks=m)
        return L.mask_distill_loss(t, s)

    assert_grads_close(mask_dist, [masks_s.copy()])
