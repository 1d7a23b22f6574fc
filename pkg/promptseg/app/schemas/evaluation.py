from typing import Literal, Optional

from pydantic import BaseModel, Field

SplitKind = Literal["internal", "external"]


class EvalRecord(BaseModel):
    dataset: str
    concept: str
    dice: float = Field(..., ge=0, le=1)
    iou: float = Field(..., ge=0, le=1)
    sample_id: str
    split_kind: SplitKind = "internal"


class DatasetScore(BaseModel):
    dataset: str
    split_kind: SplitKind
    # Unrounded percentages; rounding happens only when rendering.
    dice: float
    iou: float
    n_records: int


class Report(BaseModel):
    datasets: list[DatasetScore] = Field(default_factory=list)
    averages: dict[str, DatasetScore] = Field(default_factory=dict)

    def score_for(self, dataset: str) -> Optional[DatasetScore]:
        for score in self.datasets:
            if score.dataset == dataset:
                return score
        return None
