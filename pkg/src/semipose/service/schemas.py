"""Request and response models for the service endpoints."""
from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class GenDataRequest(BaseModel):
    out_dir: str
    n_labeled: int
    n_unlabeled: int = 0
    seed: int = 0
    image_size: int = 64
    noise_std: float = 0.02
    occlusion_prob: float = 0.0


class GenDataResponse(BaseModel):
    index_path: str
    n_labeled: int
    n_unlabeled: int


class TrainRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    resume: str | None = None


class TrainResponse(BaseModel):
    job_id: str


class MetricsRowModel(BaseModel):
    iteration: int
    loss_sup: float
    loss_un1: float
    loss_un2: float
    loss_total: float
    pck_g: float
    pck_f: float
    pck_mean: float
    pck_r1: float
    pck_r2: float
    wall_ms: int


class JobStatusResponse(BaseModel):
    job_id: str
    state: str
    error: str | None = None
    error_kind: str | None = None
    iteration: int = 0
    max_iterations: int = 0
    latest: MetricsRowModel | None = None
    out_dir: str | None = None
    metrics_path: str | None = None
    summary_path: str | None = None
    checkpoint_path: str | None = None


class JobListResponse(BaseModel):
    jobs: list[JobStatusResponse]


class PckReportModel(BaseModel):
    per_joint: list[float]
    visible_counts: list[int]
    total: float
    threshold: float


class EvalRequest(BaseModel):
    checkpoint: str
    data_dir: str
    which: str = "mean_gf"
    subset: str = "val"
    threshold: float | None = None
    config: dict | None = None
    out_path: str | None = None


class EvalResponse(BaseModel):
    reports: dict[str, PckReportModel]
    json_path: str | None = None


class PreviewRequest(BaseModel):
    data_dir: str
    out_dir: str
    index: int = 0
    seed: int = 0
    km_k: int = 5
    checkpoint: str | None = None


class PreviewResponse(BaseModel):
    files: list[str]
