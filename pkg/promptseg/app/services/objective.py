"""
Set-prediction training objective.

    total = find(o2o) + lambda_o2m * find(o2m) + seg

find(pi) supervises every query's class and presence scores (matched queries
are positives) and regresses boxes of matched pairs; seg supervises the masks
of one-to-one matched queries plus an image-level prompt-presence score. The
find terms and the per-mask seg terms are divided by the batch-wise count of
one-to-one matches (at least 1).
"""
import logging
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from app.schemas.objective import FindWeights, MatcherWeights, O2MConfig, SegWeights
from app.services.geometry import box_giou
from app.services.matching import (
    Assignment,
    MultiAssignment,
    hungarian_assign,
    one_to_many_assign,
    pairwise_cost,
)

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
# Logit for padding queries: sigmoid clamps to PROB_EPS, a confident negative.
PAD_LOGIT = -30.0


@dataclass
class InstanceTargets:
    """Ground truth for one (image, prompted concept) pair."""

    boxes: torch.Tensor  # [M, 4] normalized cxcywh
    masks: torch.Tensor  # [M, H, W] bool at canvas resolution
    concept: str
    record_id: str

    @property
    def prompt_present(self) -> bool:
        return self.boxes.shape[0] > 0


@dataclass
class FindTerms:
    ce: torch.Tensor
    pres: torch.Tensor
    l1: torch.Tensor
    giou: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.ce + self.pres + self.l1 + self.giou


@dataclass
class SegTerms:
    focal: torch.Tensor
    dice: torch.Tensor
    presence: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.focal + self.dice + self.presence


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    pres: torch.Tensor
    l1: torch.Tensor
    giou: torch.Tensor
    find_o2o: torch.Tensor
    find_o2m: torch.Tensor
    seg_focal: torch.Tensor
    dice: torch.Tensor
    seg_pres: torch.Tensor
    total: torch.Tensor
    matched_count: int

    def as_floats(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = int(value) if f.name == "matched_count" else float(value.detach())
        return out


# ── Elementwise terms ─────────────────────────────────────────────────────────

def _clamp(prob: torch.Tensor) -> torch.Tensor:
    return prob.clamp(PROB_EPS, 1 - PROB_EPS)


def focal_bce(prob: torch.Tensor, target: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    """y=1: -a (1-p)^g log p;  y=0: -(1-a) p^g log(1-p). Elementwise."""
    prob = _clamp(prob)
    target = target.to(prob.dtype)
    pos = -alpha * (1 - prob) ** gamma * torch.log(prob)
    neg = -(1 - alpha) * prob ** gamma * torch.log(1 - prob)
    return target * pos + (1 - target) * neg


def presence_loss(prob: torch.Tensor, target: torch.Tensor, pos_weight: float = 10.0) -> torch.Tensor:
    prob = _clamp(prob)
    target = target.to(prob.dtype)
    return -(pos_weight * target * torch.log(prob) + (1 - target) * torch.log(1 - prob))


def dice_loss(probs: torch.Tensor, gt: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Smooth Dice over the last two dims; empty-vs-empty is exactly 0."""
    if probs.shape != gt.shape:
        raise ValueError(f"dice_loss shape mismatch: {tuple(probs.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(probs.dtype)
    inter = (probs * gt).sum(dim=(-2, -1))
    denom = probs.sum(dim=(-2, -1)) + gt.sum(dim=(-2, -1))
    return 1 - (2 * inter + eps) / (denom + eps)


def total_loss(find_o2o, find_o2m, seg, lambda_o2m: float = 2.0):
    return find_o2o + lambda_o2m * find_o2m + seg


# ── Composite terms ───────────────────────────────────────────────────────────

def _pad_queries(logits: torch.Tensor, n_q: int) -> torch.Tensor:
    missing = n_q - logits.shape[0]
    if missing <= 0:
        return logits
    return F.pad(logits, (0, missing), value=PAD_LOGIT)


def _check_pairs(pairs: list[tuple[int, int]], n_queries: int, n_targets: int) -> None:
    for q, t in pairs:
        if not (0 <= q < n_queries and 0 <= t < n_targets):
            raise ValueError(f"assignment pair ({q}, {t}) out of range for {n_queries} queries / {n_targets} targets")


def find_loss(
    class_logits: torch.Tensor,
    presence_logits: torch.Tensor,
    pred_boxes: torch.Tensor,
    target_boxes: torch.Tensor,
    pairs: list[tuple[int, int]],
    w: FindWeights,
    matched_count: int = 1,
) -> FindTerms:
    """Find loss of one image; queries are padded to w.n_q with confident negatives."""
    _check_pairs(pairs, class_logits.shape[0], target_boxes.shape[0])
    normalizer = max(1, matched_count)

    labels = torch.zeros(max(w.n_q, class_logits.shape[0]), dtype=class_logits.dtype, device=class_logits.device)
    if pairs:
        labels[[q for q, _ in pairs]] = 1.0

    cls_prob = _pad_queries(class_logits, w.n_q).sigmoid()
    pres_prob = _pad_queries(presence_logits, w.n_q).sigmoid()
    ce = w.lambda_ce * focal_bce(cls_prob, labels, w.alpha_cls, w.gamma_cls).sum()
    pres = w.lambda_pr * presence_loss(pres_prob, labels, w.pos_weight).sum()

    if pairs:
        q_idx = [q for q, _ in pairs]
        t_idx = [t for _, t in pairs]
        src = pred_boxes[q_idx]
        tgt = target_boxes[t_idx].to(src.dtype)
        l1 = w.lambda_l1 * (src - tgt).abs().sum()
        giou = w.lambda_g * (1 - torch.diagonal(box_giou(src, tgt))).sum()
    else:
        l1 = giou = class_logits.sum() * 0.0

    return FindTerms(ce=ce / normalizer, pres=pres / normalizer, l1=l1 / normalizer, giou=giou / normalizer)


def seg_loss(
    pred_mask_logits: torch.Tensor,
    gt_masks: torch.Tensor,
    image_presence_logit: torch.Tensor,
    prompt_present: bool,
    w: SegWeights,
    matched_count: int = 1,
) -> SegTerms:
    """
    Params:
        pred_mask_logits: [K, h, w] logits of the matched queries, target order
        gt_masks: [K, H, W] matching ground-truth masks
    """
    normalizer = max(1, matched_count)
    target = torch.tensor(float(prompt_present), dtype=image_presence_logit.dtype)
    presence = w.lambda_sp * presence_loss(image_presence_logit.sigmoid(), target, pos_weight=1.0)

    if pred_mask_logits.shape[0] == 0:
        zero = image_presence_logit.sum() * 0.0
        return SegTerms(focal=zero, dice=zero, presence=presence)

    if pred_mask_logits.shape[-2:] != gt_masks.shape[-2:]:
        pred_mask_logits = F.interpolate(
            pred_mask_logits[None], size=gt_masks.shape[-2:], mode="bilinear", align_corners=False
        )[0]
    probs = pred_mask_logits.sigmoid()
    gt = gt_masks.to(probs.dtype)
    focal = focal_bce(probs, gt, w.alpha_seg, w.gamma_seg).mean(dim=(-2, -1)).sum()
    dice = dice_loss(probs, gt, w.dice_eps).sum()
    return SegTerms(
        focal=w.lambda_f * focal / normalizer,
        dice=w.lambda_d * dice / normalizer,
        presence=presence,
    )


class SetCriterion(nn.Module):
    """Matches each image's queries to its instances and composes the objective."""

    def __init__(
        self,
        matcher: MatcherWeights,
        o2m: O2MConfig,
        find: FindWeights,
        seg: SegWeights,
    ):
        super().__init__()
        self.matcher = matcher
        self.o2m = o2m
        self.find = find
        self.seg = seg

    @torch.no_grad()
    def match(self, outputs, targets: list[InstanceTargets]) -> list[tuple[Assignment, MultiAssignment]]:
        matches = []
        for b, tgt in enumerate(targets):
            n_queries = outputs.class_logits.shape[1]
            if not tgt.prompt_present:
                matches.append((Assignment(pairs=[], unmatched_queries=set(range(n_queries))), MultiAssignment(pairs=[])))
                continue
            cost = pairwise_cost(outputs.class_logits[b], outputs.boxes[b], tgt.boxes, self.matcher)
            o2o = hungarian_assign(cost)
            o2m = one_to_many_assign(outputs.class_logits[b], outputs.boxes[b], tgt.boxes, cost, o2o, self.o2m)
            matches.append((o2o, o2m))
        return matches

    def forward(self, outputs, targets: list[InstanceTargets]) -> LossBreakdown:
        matches = self.match(outputs, targets)
        matched_count = max(1, sum(len(o2o.pairs) for o2o, _ in matches))
        zero = outputs.class_logits.sum() * 0.0

        ce = pres = l1 = giou = find_o2m = zero
        seg_focal = dice = seg_pres = zero
        for b, (tgt, (o2o, o2m)) in enumerate(zip(targets, matches)):
            args = (outputs.class_logits[b], outputs.presence_logits[b], outputs.boxes[b], tgt.boxes)
            one = find_loss(*args, o2o.pairs, self.find, matched_count)
            many = find_loss(*args, o2m.pairs, self.find, matched_count)
            ce, pres, l1, giou = ce + one.ce, pres + one.pres, l1 + one.l1, giou + one.giou
            find_o2m = find_o2m + many.total

            queries = torch.as_tensor(o2o.query_indices, dtype=torch.long)
            matched_targets = torch.as_tensor(o2o.target_indices, dtype=torch.long)
            seg_terms = seg_loss(
                outputs.mask_logits[b][queries],
                tgt.masks[matched_targets],
                outputs.image_presence_logits[b],
                tgt.prompt_present,
                self.seg,
                matched_count,
            )
            seg_focal = seg_focal + seg_terms.focal
            dice = dice + seg_terms.dice
            seg_pres = seg_pres + seg_terms.presence / len(targets)

        find_o2o = ce + pres + l1 + giou
        total = total_loss(find_o2o, find_o2m, seg_focal + dice + seg_pres, self.o2m.lambda_o2m)
        return LossBreakdown(
            ce=ce, pres=pres, l1=l1, giou=giou,
            find_o2o=find_o2o, find_o2m=find_o2m,
            seg_focal=seg_focal, dice=dice, seg_pres=seg_pres,
            total=total, matched_count=matched_count,
        )
