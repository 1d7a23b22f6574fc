from pydantic import BaseModel, ConfigDict, Field


class MatcherWeights(BaseModel):
    """One-to-one focal Hungarian matcher."""

    model_config = ConfigDict(frozen=True)

    w_cls: float = Field(2.0, ge=0)
    w_box: float = Field(5.0, ge=0)
    w_giou: float = Field(2.0, ge=0)
    alpha_match: float = Field(0.25, gt=0, lt=1)
    gamma_match: float = Field(2.0, ge=0)
    # No random cost perturbation; equal costs resolve deterministically.
    stable: bool = False


class O2MConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    top_k: int = Field(4, ge=1)
    threshold: float = Field(0.4, ge=0, le=1)
    alpha_o2m: float = Field(0.3, ge=0, le=1)
    lambda_o2m: float = Field(2.0, ge=0)


class FindWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    lambda_ce: float = Field(20.0, ge=0)
    lambda_pr: float = Field(20.0, ge=0)
    alpha_cls: float = Field(0.25, ge=0, le=1)
    gamma_cls: float = Field(2.0, ge=0)
    pos_weight: float = Field(10.0, ge=0)
    lambda_l1: float = Field(5.0, ge=0)
    lambda_g: float = Field(2.0, ge=0)
    n_q: int = Field(200, ge=1)


class SegWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha_seg: float = Field(0.6, ge=0, le=1)
    gamma_seg: float = Field(2.0, ge=0)
    lambda_f: float = Field(20.0, ge=0)
    lambda_d: float = Field(30.0, ge=0)
    lambda_sp: float = Field(1.0, ge=0)
    dice_eps: float = Field(1.0, ge=0)
