import pytest
import torch

from app.schemas.objective import FindWeights, MatcherWeights, O2MConfig, SegWeights
from app.services.objective import (
    InstanceTargets,
    SetCriterion,
    dice_loss,
    find_loss,
    focal_bce,
    presence_loss,
    seg_loss,
    total_loss,
)

LN2 = 0.6931471805599453


def _t(*values):
    return torch.tensor(values, dtype=torch.float64)


# ── Elementwise terms ──

def test_focal_bce_examples():
    assert focal_bce(_t(0.5), _t(1.0), 0.25, 2.0).item() == pytest.approx(0.043322, abs=1e-6)
    assert focal_bce(_t(1.0), _t(1.0), 0.25, 2.0).item() == pytest.approx(0.0, abs=1e-6)


def test_focal_without_focusing_is_weighted_bce():
    probs = _t(0.1, 0.4, 0.8)
    targets = _t(1.0, 0.0, 1.0)
    bce = torch.nn.functional.binary_cross_entropy(probs, targets, reduction="none")
    assert torch.allclose(focal_bce(probs, targets, 0.5, 0.0), 0.5 * bce)


def test_presence_loss_examples():
    assert presence_loss(_t(0.5), _t(1.0)).item() == pytest.approx(6.93147, abs=1e-5)
    assert presence_loss(_t(0.5), _t(0.0)).item() == pytest.approx(LN2)
    assert presence_loss(_t(0.0), _t(0.0)).item() == pytest.approx(0.0, abs=1e-6)


def test_dice_loss_examples():
    hard = torch.zeros(4, 4, dtype=torch.float64)
    hard[1:3, 1:3] = 1.0
    assert dice_loss(hard, hard).item() == pytest.approx(0.0)

    gt = torch.zeros(4, 4, dtype=torch.float64)
    gt[0, :3] = 1.0
    assert dice_loss(torch.zeros(4, 4, dtype=torch.float64), gt).item() == pytest.approx(0.75)
    assert dice_loss(torch.zeros(3, 3), torch.zeros(3, 3)).item() == 0.0

    with pytest.raises(ValueError, match="shape mismatch"):
        dice_loss(torch.zeros(3, 3), torch.zeros(3, 4))


def test_total_loss_is_linear():
    assert total_loss(1.0, 0.5, 2.0) == 4.0
    assert total_loss(0.0, 0.0, 0.0) == 0.0
    assert total_loss(1.0, 0.5, 2.0, lambda_o2m=0.0) == 3.0


# ── Find loss ──

BOX = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)


def test_find_loss_one_query_even_odds():
    terms = find_loss(_t(0.0), _t(0.0), BOX, BOX, [(0, 0)], FindWeights(n_q=1))
    assert terms.l1.item() == 0.0
    assert terms.giou.item() == pytest.approx(0.0, abs=1e-12)
    assert terms.total.item() == pytest.approx(139.496, abs=1e-3)


def test_find_loss_without_targets_vanishes_for_confident_negatives():
    logits = torch.full((5,), -40.0, dtype=torch.float64)
    terms = find_loss(logits, logits, BOX.repeat(5, 1), torch.zeros(0, 4, dtype=torch.float64), [], FindWeights(n_q=5))
    assert terms.total.item() == pytest.approx(0.0, abs=1e-4)


def test_padding_queries_add_almost_nothing():
    w_small = FindWeights(n_q=1)
    w_padded = FindWeights(n_q=50)
    small = find_loss(_t(0.0), _t(0.0), BOX, BOX, [(0, 0)], w_small)
    padded = find_loss(_t(0.0), _t(0.0), BOX, BOX, [(0, 0)], w_padded)
    assert padded.total.item() == pytest.approx(small.total.item(), abs=1e-3)


def test_find_loss_checks_pair_indices():
    with pytest.raises(ValueError, match="out of range"):
        find_loss(_t(0.0), _t(0.0), BOX, BOX, [(1, 0)], FindWeights(n_q=1))
    with pytest.raises(ValueError, match="out of range"):
        find_loss(_t(0.0), _t(0.0), BOX, BOX, [(0, 3)], FindWeights(n_q=1))


def test_find_loss_normalizes_by_matched_count():
    one = find_loss(_t(0.0), _t(0.0), BOX, BOX, [(0, 0)], FindWeights(n_q=1), matched_count=1)
    four = find_loss(_t(0.0), _t(0.0), BOX, BOX, [(0, 0)], FindWeights(n_q=1), matched_count=4)
    assert four.total.item() == pytest.approx(one.total.item() / 4)


# ── Seg loss ──

def test_seg_loss_single_soft_mask():
    logits = torch.zeros(1, 2, 2, dtype=torch.float64)
    gt = torch.ones(1, 2, 2, dtype=torch.bool)
    terms = seg_loss(logits, gt, _t(40.0)[0], True, SegWeights())
    assert terms.focal.item() == pytest.approx(20 * 0.103972, abs=1e-5)
    assert terms.dice.item() == pytest.approx(30 * (1 - 5 / 7), abs=1e-6)
    assert terms.presence.item() == pytest.approx(0.0, abs=1e-6)
    assert terms.total.item() == pytest.approx(20 * 0.103972 + 30 * 0.285714, abs=1e-4)


def test_seg_loss_perfect_prediction():
    gt = torch.zeros(1, 4, 4, dtype=torch.bool)
    gt[0, 1:3, 1:3] = True
    logits = torch.where(gt, 40.0, -40.0).double()
    terms = seg_loss(logits, gt, _t(40.0)[0], True, SegWeights())
    assert terms.total.item() == pytest.approx(0.0, abs=1e-4)


def test_seg_loss_absent_prompt_is_presence_only():
    terms = seg_loss(
        torch.zeros(0, 4, 4, dtype=torch.float64), torch.zeros(0, 4, 4, dtype=torch.bool), _t(0.0)[0], False, SegWeights()
    )
    assert terms.focal.item() == 0.0 and terms.dice.item() == 0.0
    assert terms.total.item() == pytest.approx(LN2)


def test_seg_loss_upsamples_low_resolution_logits():
    gt = torch.ones(1, 8, 8, dtype=torch.bool)
    terms = seg_loss(torch.full((1, 2, 2), 40.0, dtype=torch.float64), gt, _t(40.0)[0], True, SegWeights())
    assert terms.total.item() == pytest.approx(0.0, abs=1e-4)


# ── Criterion ──

class _Outputs:
    def __init__(self, class_logits, presence_logits, boxes, mask_logits, image_presence_logits):
        self.class_logits = class_logits
        self.presence_logits = presence_logits
        self.boxes = boxes
        self.mask_logits = mask_logits
        self.image_presence_logits = image_presence_logits


def _criterion(n_q):
    return SetCriterion(MatcherWeights(), O2MConfig(), FindWeights(n_q=n_q), SegWeights())


def _target(boxes, masks, concept="polyp"):
    return InstanceTargets(boxes=boxes, masks=masks, concept=concept, record_id="r0")


def test_criterion_components_add_up():
    torch.manual_seed(0)
    n_q = 6
    outputs = _Outputs(
        torch.randn(2, n_q, dtype=torch.float64),
        torch.randn(2, n_q, dtype=torch.float64),
        torch.rand(2, n_q, 4, dtype=torch.float64) * 0.5 + 0.25,
        torch.randn(2, n_q, 4, 4, dtype=torch.float64),
        torch.randn(2, dtype=torch.float64),
    )
    masks = torch.zeros(2, 8, 8, dtype=torch.bool)
    masks[0, :4, :4] = True
    masks[1, 4:, 2:6] = True
    targets = [
        _target(torch.tensor([[0.25, 0.25, 0.5, 0.5], [0.5, 0.75, 0.5, 0.5]], dtype=torch.float64), masks),
        _target(torch.zeros(0, 4, dtype=torch.float64), torch.zeros(0, 8, 8, dtype=torch.bool), "lung"),
    ]

    loss = _criterion(n_q)(outputs, targets)

    assert loss.matched_count == 2
    assert loss.find_o2o.item() == pytest.approx((loss.ce + loss.pres + loss.l1 + loss.giou).item())
    seg = loss.seg_focal + loss.dice + loss.seg_pres
    assert loss.total.item() == pytest.approx((loss.find_o2o + 2.0 * loss.find_o2m + seg).item())
    assert set(loss.as_floats()) >= {"ce", "pres", "total", "matched_count"}


def test_criterion_with_no_instances_clamps_matched_count():
    n_q = 3
    outputs = _Outputs(
        torch.full((1, n_q), -40.0, dtype=torch.float64),
        torch.full((1, n_q), -40.0, dtype=torch.float64),
        torch.full((1, n_q, 4), 0.5, dtype=torch.float64),
        torch.zeros(1, n_q, 4, 4, dtype=torch.float64),
        torch.full((1,), -40.0, dtype=torch.float64),
    )
    targets = [_target(torch.zeros(0, 4, dtype=torch.float64), torch.zeros(0, 8, 8, dtype=torch.bool))]
    loss = _criterion(n_q)(outputs, targets)
    assert loss.matched_count == 1
    assert loss.total.item() == pytest.approx(0.0, abs=1e-4)


def test_criterion_is_differentiable():
    torch.manual_seed(1)
    n_q = 4
    class_logits = torch.randn(1, n_q, dtype=torch.float64, requires_grad=True)
    presence_logits = torch.randn(1, n_q, dtype=torch.float64, requires_grad=True)
    raw_boxes = torch.randn(1, n_q, 4, dtype=torch.float64, requires_grad=True)
    mask_logits = torch.randn(1, n_q, 4, 4, dtype=torch.float64, requires_grad=True)
    image_presence = torch.randn(1, dtype=torch.float64, requires_grad=True)
    masks = torch.zeros(1, 4, 4, dtype=torch.bool)
    masks[0, 1:3, 1:3] = True
    targets = [_target(torch.tensor([[0.5, 0.5, 0.5, 0.5]], dtype=torch.float64), masks)]
    criterion = _criterion(n_q)

    def loss_fn(cl, pl, rb, ml, ip):
        return criterion(_Outputs(cl, pl, rb.sigmoid(), ml, ip), targets).total

    assert torch.autograd.gradcheck(
        loss_fn, (class_logits, presence_logits, raw_boxes, mask_logits, image_presence), eps=1e-6, atol=1e-5
    )


# ── Invariants ──

def test_find_loss_ignores_query_order():
    gen = torch.Generator().manual_seed(3)
    n = 6
    class_logits = torch.randn(n, generator=gen, dtype=torch.float64)
    presence_logits = torch.randn(n, generator=gen, dtype=torch.float64)
    pred_boxes = torch.rand(n, 4, generator=gen, dtype=torch.float64) * 0.4 + 0.3
    target_boxes = torch.rand(3, 4, generator=gen, dtype=torch.float64) * 0.4 + 0.3
    pairs = [(4, 0), (1, 1), (5, 2)]
    w = FindWeights(n_q=n)
    reference = find_loss(class_logits, presence_logits, pred_boxes, target_boxes, pairs, w, matched_count=3)

    for seed in range(20):
        perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
        position = {int(q): i for i, q in enumerate(perm)}
        shuffled = find_loss(
            class_logits[perm], presence_logits[perm], pred_boxes[perm], target_boxes,
            [(position[q], t) for q, t in pairs], w, matched_count=3,
        )
        for name in ("ce", "pres", "l1", "giou"):
            assert getattr(shuffled, name).item() == pytest.approx(getattr(reference, name).item(), rel=1e-12)


def test_dice_loss_is_symmetric_for_hard_masks():
    gen = torch.Generator().manual_seed(4)
    for _ in range(100):
        a = torch.rand(6, 6, generator=gen) > 0.5
        b = torch.rand(6, 6, generator=gen) > 0.6
        forward = dice_loss(a.double(), b).item()
        backward = dice_loss(b.double(), a).item()
        assert forward == pytest.approx(backward, abs=1e-15)


# ── Gradients against central differences ──

def _probs(gen, *shape):
    return (torch.rand(*shape, generator=gen, dtype=torch.float64) * 0.9 + 0.05).requires_grad_()


def _check(fn, *inputs):
    assert torch.autograd.gradcheck(fn, inputs, eps=1e-5, atol=1e-7, rtol=1e-4)


def test_focal_bce_gradient():
    gen = torch.Generator().manual_seed(10)
    for _ in range(100):
        target = (torch.rand(1, generator=gen) > 0.5).double()
        _check(lambda p: focal_bce(p, target, 0.25, 2.0), _probs(gen, 1))


def test_presence_loss_gradient():
    gen = torch.Generator().manual_seed(11)
    for _ in range(100):
        target = (torch.rand(1, generator=gen) > 0.5).double()
        _check(lambda p: presence_loss(p, target, 10.0), _probs(gen, 1))


def test_dice_loss_gradient():
    gen = torch.Generator().manual_seed(12)
    for _ in range(100):
        gt = torch.rand(4, 4, generator=gen) > 0.5
        _check(lambda p: dice_loss(p, gt), _probs(gen, 4, 4))
