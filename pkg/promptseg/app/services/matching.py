"""
Query-to-instance assignment.

The one-to-one matcher solves the linear assignment problem on a focal
classification cost plus L1 and GIoU box costs. The one-to-many matcher then
lets up to top_k queries supervise each target, always keeping the
one-to-one partner.
"""
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from app.schemas.objective import MatcherWeights, O2MConfig
from app.services.geometry import box_giou, box_iou, l1_box

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
BRUTE_FORCE_MAX_TARGETS = 8
# Relative slack under which two assignment totals count as equal.
TIE_TOLERANCE = 1e-12


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (query, target), sorted by target
    unmatched_queries: set[int] = field(default_factory=set)
    total_cost: float = 0.0

    @property
    def query_indices(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def target_indices(self) -> list[int]:
        return [t for _, t in self.pairs]


@dataclass
class MultiAssignment:
    pairs: list[tuple[int, int]]  # (query, target), sorted by query

    def count_for(self, target: int) -> int:
        return sum(1 for _, t in self.pairs if t == target)


def focal_match_cost(prob: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    """Positive-minus-negative focal cost; strictly decreasing in prob."""
    prob = prob.clamp(PROB_EPS, 1 - PROB_EPS)
    pos = alpha * (1 - prob) ** gamma * (-torch.log(prob))
    neg = (1 - alpha) * prob ** gamma * (-torch.log(1 - prob))
    return pos - neg


@torch.no_grad()
def pairwise_cost(
    class_logits: torch.Tensor,
    pred_boxes: torch.Tensor,
    target_boxes: torch.Tensor,
    w: MatcherWeights,
) -> torch.Tensor:
    """
    Cost matrix [N, M] between N queries and M instances of the prompted concept.

    Params:
        class_logits: [N] logit of the prompted concept per query
        pred_boxes: [N, 4] normalized cxcywh
        target_boxes: [M, 4] normalized cxcywh
    """
    if class_logits.numel() == 0 or target_boxes.shape[0] == 0:
        raise ValueError("pairwise_cost needs at least one query and one target")
    if not torch.isfinite(class_logits).all() or not torch.isfinite(pred_boxes).all():
        raise ValueError("non-finite prediction logits or boxes")

    prob = class_logits.double().sigmoid()
    cost_class = focal_match_cost(prob, w.alpha_match, w.gamma_match)[:, None]
    pred = pred_boxes.double()
    tgt = target_boxes.double()
    cost_bbox = l1_box(pred, tgt)
    cost_giou = -box_giou(pred, tgt)
    return w.w_cls * cost_class + w.w_box * cost_bbox + w.w_giou * cost_giou


def _as_matrix(cost) -> np.ndarray:
    if isinstance(cost, torch.Tensor):
        cost = cost.detach().cpu().double().numpy()
    matrix = np.asarray(cost, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"cost must be a 2-D matrix, got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise ValueError("cost matrix has non-finite entries")
    return matrix


def _assignment(matrix: np.ndarray, pairs: list[tuple[int, int]]) -> Assignment:
    pairs = sorted(pairs, key=lambda p: p[1])
    matched = {q for q, _ in pairs}
    total = float(sum(matrix[q, t] for q, t in pairs))
    unmatched = set(range(matrix.shape[0])) - matched
    return Assignment(pairs=pairs, unmatched_queries=unmatched, total_cost=total)


def _lowest_index_optimum(matrix: np.ndarray, optimum: float) -> list[tuple[int, int]]:
    """
    Among all optimal injections pick the one whose query tuple (query of
    target 0, target 1, ...) is lexicographically smallest. Each target takes
    the lowest free query that still admits an optimal completion.
    """
    n_queries, n_targets = matrix.shape
    tol = TIE_TOLERANCE * max(1.0, abs(optimum))
    free = np.ones(n_queries, dtype=bool)
    fixed = 0.0
    pairs: list[tuple[int, int]] = []
    for t in range(n_targets):
        rest = list(range(t + 1, n_targets))
        for q in np.flatnonzero(free).tolist():
            head = fixed + matrix[q, t]
            if not rest:
                if head <= optimum + tol:
                    break
                continue
            rows = free.copy()
            rows[q] = False
            sub = matrix[np.ix_(rows, rest)]
            # Column minima bound the completion from below.
            if head + sub.min(axis=0).sum() > optimum + tol:
                continue
            r, c = linear_sum_assignment(sub)
            if head + sub[r, c].sum() <= optimum + tol:
                break
        else:
            raise RuntimeError(f"no optimal completion for target {t}")
        free[q] = False
        fixed = head
        pairs.append((q, t))
    return pairs


def hungarian_assign(cost) -> Assignment:
    """
    Minimum-cost injection of targets (columns) into queries (rows). Equal-cost
    optima resolve to the lowest query indices, target by target.
    """
    matrix = _as_matrix(cost)
    n_queries, n_targets = matrix.shape
    if n_queries < n_targets:
        raise ValueError("more targets than queries")
    if n_targets == 0:
        return Assignment(pairs=[], unmatched_queries=set(range(n_queries)), total_cost=0.0)
    rows, cols = linear_sum_assignment(matrix)
    optimum = float(matrix[rows, cols].sum())
    return _assignment(matrix, _lowest_index_optimum(matrix, optimum))


def brute_force_assign(cost) -> Assignment:
    """
    Exhaustive search over injections. Candidates are enumerated in
    lexicographic order of the query tuple (target 0 first) and only a strictly
    lower total replaces the incumbent, so ties keep the lowest query indices.
    """
    matrix = _as_matrix(cost)
    n_queries, n_targets = matrix.shape
    if n_targets > BRUTE_FORCE_MAX_TARGETS:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_MAX_TARGETS} targets, got {n_targets}")
    if n_queries < n_targets:
        raise ValueError("more targets than queries")

    best: tuple[int, ...] | None = None
    best_total = float("inf")
    rows = matrix.tolist()
    for queries in itertools.permutations(range(n_queries), n_targets):
        total = sum(rows[q][t] for t, q in enumerate(queries))
        if total < best_total:
            best, best_total = queries, total
    pairs = [(q, t) for t, q in enumerate(best or ())]
    return _assignment(matrix, pairs)


@torch.no_grad()
def one_to_many_assign(
    class_logits: torch.Tensor,
    pred_boxes: torch.Tensor,
    target_boxes: torch.Tensor,
    cost,
    o2o: Assignment,
    cfg: O2MConfig,
) -> MultiAssignment:
    """
    For each target rank candidate queries by s = a*p + (1-a)*IoU and admit up
    to top_k with s >= threshold. The one-to-one partner is always admitted and
    counts toward top_k; queries that are another target's one-to-one partner
    are not candidates. A query admitted for several targets keeps its best one.
    """
    matrix = _as_matrix(cost)
    n_queries, n_targets = matrix.shape
    if n_targets == 0:
        return MultiAssignment(pairs=[])

    prob = class_logits.double().sigmoid().cpu().numpy()
    iou = box_iou(pred_boxes.double(), target_boxes.double()).cpu().numpy()
    score = cfg.alpha_o2m * prob[:, None] + (1 - cfg.alpha_o2m) * iou

    partner_of_target = {t: q for q, t in o2o.pairs}
    o2o_queries = set(partner_of_target.values())

    admitted: dict[int, list[int]] = {}  # query -> targets
    for t in range(n_targets):
        chosen: list[int] = []
        partner = partner_of_target.get(t)
        if partner is not None:
            chosen.append(partner)
        # Highest score first; cost then index break ties.
        ranked = sorted(range(n_queries), key=lambda q: (-score[q, t], matrix[q, t], q))
        for q in ranked:
            if len(chosen) >= cfg.top_k:
                break
            if q in o2o_queries or score[q, t] < cfg.threshold:
                continue
            chosen.append(q)
        for q in chosen:
            admitted.setdefault(q, []).append(t)

    pairs = []
    for q, targets in admitted.items():
        if q in o2o_queries:
            pairs.append((q, next(t for t, p in partner_of_target.items() if p == q)))
            continue
        best_target = max(targets, key=lambda t: (score[q, t], -t))
        pairs.append((q, best_target))
    return MultiAssignment(pairs=sorted(pairs))
