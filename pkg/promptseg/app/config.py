"""
Run configuration.

Resolution order, later wins:
    field defaults -> PROMPTSEG_* environment -> config file -> CLI overrides

Config files are flat KEY=value lines (read with python-dotenv); keys are
case-insensitive and dashes map to underscores.
"""
import logging
from pathlib import Path
from typing import Any

from dotenv import dotenv_values
from pydantic import Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.exceptions import InputValidationError
from app.schemas.corpus import SplitSpec
from app.schemas.objective import FindWeights, MatcherWeights, O2MConfig, SegWeights
from app.schemas.training import GroupRates, LLRDSpec, ModelConfig, ScheduleSpec

logger = logging.getLogger(__name__)


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="PROMPTSEG_", case_sensitive=False, extra="forbid")

    # ── Paths ──
    manifest: str = ""
    splits_dir: str = ""  # empty: <manifest dir>/splits
    out_dir: str = "runs/default"
    resume: str = ""
    log_level: str = "INFO"

    # ── Split ──
    train_fraction: float = Field(0.85, gt=0.0, lt=1.0)
    split_seed: int = Field(42, ge=0)

    # ── One-to-one matcher ──
    w_cls: float = 2.0
    w_box: float = 5.0
    w_giou: float = 2.0
    alpha_match: float = 0.25
    gamma_match: float = 2.0

    # ── One-to-many matcher ──
    top_k: int = 4
    o2m_threshold: float = 0.4
    alpha_o2m: float = 0.3
    lambda_o2m: float = 2.0

    # ── Find loss ──
    lambda_ce: float = 20.0
    lambda_pr: float = 20.0
    alpha_cls: float = 0.25
    gamma_cls: float = 2.0
    pos_weight: float = 10.0
    lambda_l1: float = 5.0
    lambda_g: float = 2.0

    # ── Segmentation loss ──
    alpha_seg: float = 0.6
    gamma_seg: float = 2.0
    lambda_f: float = 20.0
    lambda_d: float = 30.0
    lambda_sp: float = 1.0
    dice_eps: float = 1.0

    # ── Rates and schedule ──
    lr_decoder_seg_dot: float = 3e-4
    lr_vision_backbone: float = 5e-5
    lr_language_backbone: float = 5e-5
    lr_geometry_prompt: float = 1e-4
    llrd_gamma: float = 0.85
    llrd_layers: int = 12
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01

    # ── Model ──
    n_q: int = 200
    embed_dim: int = 64
    hidden_dim: int = 32
    decoder_layers: int = 2
    num_heads: int = 4
    canvas: int = 1008
    mask_stride: int = 4

    # ── Training loop ──
    seed: int = 42
    batch_size: int = Field(4, ge=1)
    max_epochs: int = Field(10, ge=1)
    max_steps: int = Field(0, ge=0)  # 0: run max_epochs
    grad_clip_norm: float = Field(0.0, ge=0)  # 0: no clipping
    eval_every: int = Field(0, ge=0)  # 0: only at the end
    checkpoint_every: int = Field(500, ge=0)
    log_every: int = Field(50, ge=1)
    num_workers: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_blocks(self):
        # Building every typed block surfaces range errors at load time.
        for view in (
            self.matcher_weights, self.o2m_config, self.find_weights, self.seg_weights,
            self.llrd_spec, self.group_rates, self.schedule_spec, self.model_config_view, self.split_spec,
        ):
            view()
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} must be divisible by num_heads {self.num_heads}")
        return self

    # ── Typed views ──

    def matcher_weights(self) -> MatcherWeights:
        return MatcherWeights(
            w_cls=self.w_cls, w_box=self.w_box, w_giou=self.w_giou,
            alpha_match=self.alpha_match, gamma_match=self.gamma_match,
        )

    def o2m_config(self) -> O2MConfig:
        return O2MConfig(
            top_k=self.top_k, threshold=self.o2m_threshold,
            alpha_o2m=self.alpha_o2m, lambda_o2m=self.lambda_o2m,
        )

    def find_weights(self) -> FindWeights:
        return FindWeights(
            lambda_ce=self.lambda_ce, lambda_pr=self.lambda_pr,
            alpha_cls=self.alpha_cls, gamma_cls=self.gamma_cls, pos_weight=self.pos_weight,
            lambda_l1=self.lambda_l1, lambda_g=self.lambda_g, n_q=self.n_q,
        )

    def seg_weights(self) -> SegWeights:
        return SegWeights(
            alpha_seg=self.alpha_seg, gamma_seg=self.gamma_seg,
            lambda_f=self.lambda_f, lambda_d=self.lambda_d, lambda_sp=self.lambda_sp,
            dice_eps=self.dice_eps,
        )

    def llrd_spec(self) -> LLRDSpec:
        return LLRDSpec(eta_base=self.lr_vision_backbone, num_layers=self.llrd_layers, gamma=self.llrd_gamma)

    def group_rates(self) -> GroupRates:
        return GroupRates(
            decoder_seg_dot=self.lr_decoder_seg_dot,
            vision_backbone=self.lr_vision_backbone,
            language_backbone=self.lr_language_backbone,
            geometry_prompt=self.lr_geometry_prompt,
        )

    def schedule_spec(self) -> ScheduleSpec:
        return ScheduleSpec(
            warmup_steps=self.warmup_steps, beta1=self.beta1, beta2=self.beta2,
            weight_decay=self.weight_decay,
        )

    def model_config_view(self) -> ModelConfig:
        # The encoder depth is the layer count that decay is defined over.
        return ModelConfig(
            n_q=self.n_q, embed_dim=self.embed_dim, hidden_dim=self.hidden_dim,
            encoder_depth=self.llrd_layers, decoder_layers=self.decoder_layers,
            num_heads=self.num_heads, canvas=self.canvas, mask_stride=self.mask_stride,
        )

    def split_spec(self) -> SplitSpec:
        return SplitSpec(train_fraction=self.train_fraction, seed=self.split_seed)

    def resolved_splits_dir(self) -> Path:
        if self.splits_dir:
            return Path(self.splits_dir)
        if not self.manifest:
            raise InputValidationError("Either manifest or splits_dir must be set")
        return Path(self.manifest).parent / "splits"


def _normalize_key(key: str) -> str:
    return key.strip().lstrip("-").lower().replace("-", "_")


def parse_overrides(args: list[str]) -> dict[str, str]:
    """`--key value` / `--key=value` pairs -> {key: value}."""
    overrides: dict[str, str] = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--"):
            raise InputValidationError(f"Unexpected argument '{arg}'; overrides look like --key value")
        if "=" in arg:
            key, value = arg.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise InputValidationError(f"Override {arg} has no value")
            key, value = arg, args[i + 1]
            i += 2
        overrides[_normalize_key(key)] = value
    return overrides


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: {path}")
    values = dotenv_values(path)
    return {_normalize_key(k): v for k, v in values.items() if v is not None}


def load_run_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path:
        values.update(read_config_file(path))
    values.update({_normalize_key(k): v for k, v in (overrides or {}).items() if v is not None})

    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise InputValidationError(f"Unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first["loc"]) or "config"
        raise InputValidationError(f"Invalid config: {loc}: {first['msg']}") from e


def render_config(cfg: RunConfig) -> str:
    dumped = cfg.model_dump()
    return "".join(f"{key}={dumped[key]}\n" for key in sorted(dumped))
