"""
Learning-rate machinery.

    rate(group, layer, t) = GroupRates[group] * llrd(layer) * schedule(t)

llrd applies to the vision backbone only: layer l of L gets gamma ** (L - l),
so layer L (nearest the output) trains at the full backbone rate. The
schedule ramps linearly for W steps and then decays as sqrt(W / t).
"""
import logging
import math

import torch
from torch import nn
from torch.optim.lr_scheduler import LRScheduler

from app.models.segmenter import parameter_groups
from app.schemas.training import VISION_BACKBONE, GroupRates, LLRDSpec, ScheduleSpec

logger = logging.getLogger(__name__)


def llrd_factor(layer: int, spec: LLRDSpec) -> float:
    if not 1 <= layer <= spec.num_layers:
        raise ValueError(f"layer {layer} outside 1..{spec.num_layers}")
    return spec.gamma ** (spec.num_layers - layer)


def llrd_rate(layer: int, spec: LLRDSpec) -> float:
    return spec.eta_base * llrd_factor(layer, spec)


def schedule_factor(t: int, spec: ScheduleSpec) -> float:
    if t < 1:
        raise ValueError(f"step must be >= 1, got {t}")
    warmup = spec.warmup_steps
    if t <= warmup:
        return t / warmup
    return math.sqrt(warmup / t)


def lr_at_step(t: int, base: float, spec: ScheduleSpec) -> float:
    return base * schedule_factor(t, spec)


def effective_rate(
    group: str,
    layer: int | None,
    t: int,
    rates: GroupRates,
    llrd: LLRDSpec,
    schedule: ScheduleSpec,
) -> float:
    base = rates.rate_for(group)
    if layer is not None:
        if group != VISION_BACKBONE:
            raise ValueError(f"layer-wise decay only applies to {VISION_BACKBONE}, not {group}")
        base *= llrd_factor(layer, llrd)
    return lr_at_step(t, base, schedule)


def build_optimizer(
    model: nn.Module,
    rates: GroupRates,
    llrd: LLRDSpec,
    schedule: ScheduleSpec,
) -> torch.optim.AdamW:
    """
    AdamW with one param group per named group, except the vision backbone,
    which gets one group per layer. Each group carries `name`, `layer` and
    `base_lr` so the scheduler and the loss log can read them back.
    """
    groups = parameter_groups(model)
    if len(groups.layer_indices) != llrd.num_layers:
        raise ValueError(
            f"backbone has {len(groups.layer_indices)} layers but decay is configured for {llrd.num_layers}"
        )

    param_groups = []
    for name, params in groups.named.items():
        if name == VISION_BACKBONE or not params:
            continue
        base = rates.rate_for(name)
        param_groups.append({"params": [p for _, p in params], "name": name, "layer": None, "base_lr": base, "lr": base})
    for layer in groups.layer_indices:
        params = groups.backbone_layers[layer]
        if not params:
            continue
        base = rates.rate_for(VISION_BACKBONE) * llrd_factor(layer, llrd)
        param_groups.append(
            {"params": [p for _, p in params], "name": VISION_BACKBONE, "layer": layer, "base_lr": base, "lr": base}
        )

    logger.info("Optimizer: %d param groups, betas=%s, weight_decay=%s", len(param_groups), schedule.betas, schedule.weight_decay)
    return torch.optim.AdamW(param_groups, betas=schedule.betas, weight_decay=schedule.weight_decay)


class InverseSqrtWarmup(LRScheduler):
    """
    Linear warmup then inverse-square-root decay, applied to every group's
    base rate. Step it once after each optimizer step; the first optimizer
    step runs at t = 1.
    """

    def __init__(self, optimizer, spec: ScheduleSpec, last_epoch: int = -1):
        self.spec = spec
        super().__init__(optimizer, last_epoch)

    @property
    def step_number(self) -> int:
        return self.last_epoch + 1

    def get_lr(self) -> list[float]:
        factor = schedule_factor(self.step_number, self.spec)
        return [base * factor for base in self.base_lrs]


def current_rates(optimizer) -> dict[str, float]:
    """Per-group learning rates keyed by group name (`vision_backbone.L` per layer)."""
    out = {}
    for group in optimizer.param_groups:
        key = group.get("name", "group")
        if group.get("layer") is not None:
            key = f"{key}.{group['layer']}"
        out[key] = group["lr"]
    return out
