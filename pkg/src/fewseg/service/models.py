"""Pydantic request/response models shared by the HTTP service and the CLI.

RunConfig is the single flat namespace for train/eval/predict/viz runs; JSON
config files mirror these field names and CLI flags override them.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator

from ..decoder import DecoderConfig


class DecoderFields(BaseModel):
    d: int = 96
    gn_groups: int = 4
    num_dscm: int = 2
    dscm_repeats: int = 3
    support_stride: int = 2
    fusion: Literal["early", "late"] = "early"
    m: int = 1
    use_text: bool = False

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            d=self.d,
            gn_groups=self.gn_groups,
            num_dscm=self.num_dscm,
            dscm_repeats=self.dscm_repeats,
            support_stride=self.support_stride,
            fusion=self.fusion,
            m=self.m,
            use_text=self.use_text,
        )


class RunConfig(DecoderFields):
    manifest: str
    out: str = "run-out"
    fold: int = 0  # -1 evaluates every manifest class as a test class
    dataset_style: Literal["pascal", "coco", "synthetic"] = "synthetic"
    k: int = Field(default=1, ge=1)
    iterations: int = Field(default=300, ge=0)
    lr: float = 0.001
    seed: int = 0
    episodes: int = Field(default=1000, ge=1)
    workers: int = Field(default=1, ge=1)
    checkpoint: Optional[str] = None
    split: Literal["train", "test"] = "test"

    @field_validator("lr")
    @classmethod
    def _lr_positive(cls, v):
        if v <= 0:
            raise ValueError("lr must be positive")
        return v

    @field_validator("fold")
    @classmethod
    def _fold_range(cls, v):
        if v != -1 and not 0 <= v <= 3:
            raise ValueError("fold must be in 0..3, or -1 for the all-classes smoke fold")
        return v


class SynthRequest(BaseModel):
    out: str
    n_classes: int = 8
    images_per_class: int = 5
    seed: int = 0


class SynthResponse(BaseModel):
    manifest: str
    records: int
    classes: int


class TrainResponse(BaseModel):
    checkpoint: str
    loss_csv: str
    meta: str
    steps: int
    final_loss: Optional[float] = None


class EvalResponse(BaseModel):
    miou: float
    per_class: dict[int, float]
    undefined_classes: list[int]
    episodes: int
    results_csv: str
    meta: str


class PredictResponse(BaseModel):
    mask_pgm: str
    mask_tensor: str
    meta: str
    class_id: int
    episode_id: str
    iou: float


class VizResponse(BaseModel):
    files: list[str]
    meta: str
    class_id: int
    episode_id: str


class ParamsRequest(DecoderFields):
    pass


class ParamsResponse(BaseModel):
    count: int
    by_component: dict[str, int]


class HealthResponse(BaseModel):
    status: str
    version: str
