from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field

VISION_BACKBONE = "vision_backbone"
LANGUAGE_BACKBONE = "language_backbone"
GEOMETRY_PROMPT = "geometry_prompt"
DECODER_SEG_DOT = "decoder_seg_dot"

GROUP_NAMES = (DECODER_SEG_DOT, VISION_BACKBONE, LANGUAGE_BACKBONE, GEOMETRY_PROMPT)


class LLRDSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    eta_base: float = Field(5e-5, gt=0)
    num_layers: int = Field(12, ge=1)
    gamma: float = Field(0.85, gt=0, le=1)


class GroupRates(BaseModel):
    model_config = ConfigDict(frozen=True)

    decoder_seg_dot: float = Field(3e-4, gt=0)
    vision_backbone: float = Field(5e-5, gt=0)
    language_backbone: float = Field(5e-5, gt=0)
    geometry_prompt: float = Field(1e-4, gt=0)

    def rate_for(self, group: str) -> float:
        if group not in GROUP_NAMES:
            raise ValueError(f"Unknown parameter group: {group}")
        return getattr(self, group)


class ScheduleSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    warmup_steps: int = Field(1000, ge=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    weight_decay: float = Field(0.01, ge=0)

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_q: int = Field(200, ge=1)
    embed_dim: int = Field(64, ge=1)
    hidden_dim: int = Field(32, ge=8)
    encoder_depth: int = Field(12, ge=1)
    decoder_layers: int = Field(2, ge=1)
    num_heads: int = Field(4, ge=1)
    canvas: int = Field(1008, ge=16)
    # Mask logits live at canvas / mask_stride before upsampling.
    mask_stride: int = Field(4, ge=1)


class StepRecord(BaseModel):
    """One loss-log line."""

    step: int
    epoch: int
    ce: float
    pres: float
    l1: float
    giou: float
    find_o2o: float
    find_o2m: float
    seg_focal: float
    dice: float
    seg_pres: float
    total: float
    matched_count: int
    lr: dict[str, float] = Field(default_factory=dict)
    batch_ids: list[str] = Field(default_factory=list)


class CheckpointMeta(BaseModel):
    format_version: int = 1
    config: dict[str, Any] = Field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_val_dice: Optional[float] = None
    torch_rng_state: Optional[list[int]] = None
