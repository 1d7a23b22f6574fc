from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, field_validator


class SampleRecord(BaseModel):
    """One manifest line. Paths are resolved against the manifest directory on load."""

    model_config = ConfigDict(populate_by_name=True, frozen=True)

    id: str = Field(..., min_length=1)
    image_path: Path = Field(..., alias="image")
    mask_path: Path = Field(..., alias="mask")
    dataset_name: str = Field(..., alias="dataset", min_length=1)
    modality: str = ""
    label_map: dict[int, str] = Field(default_factory=dict, alias="labels")

    @field_validator("label_map")
    @classmethod
    def label_ids_fit_in_png(cls, v: dict[int, str]):
        for label_id, concept in v.items():
            if not 1 <= label_id <= 255:
                raise ValueError(f"label id {label_id} outside 1..255 (0 is background)")
            if not concept or not concept.strip():
                raise ValueError(f"label id {label_id} has an empty concept")
        return v


class SplitSpec(BaseModel):
    train_fraction: float = Field(0.85, gt=0.0, lt=1.0)
    seed: int = Field(42, ge=0, lt=1 << 64)


class ConceptDictionary(BaseModel):
    """(dataset, label id) -> canonical concept, plus the sorted shared vocabulary."""

    entries: dict[str, dict[int, str]] = Field(default_factory=dict)
    vocabulary: list[str] = Field(default_factory=list)

    def concept_for(self, dataset: str, label_id: int) -> str | None:
        return self.entries.get(dataset, {}).get(label_id)

    def concepts_for_dataset(self, dataset: str) -> list[str]:
        seen: list[str] = []
        for label_id in sorted(self.entries.get(dataset, {})):
            concept = self.entries[dataset][label_id]
            if concept not in seen:
                seen.append(concept)
        return seen

    def label_ids_for(self, dataset: str, concept: str) -> list[int]:
        return sorted(
            label_id
            for label_id, c in self.entries.get(dataset, {}).items()
            if c == concept
        )
