"""Request/response schemas for the HTTP service.

Configs travel as the same flat key=value text the CLI reads, plus the
usual overrides (seed, out, variant) so a client never has to rewrite the
whole file to flip one knob.
"""

from typing import List, Optional

from pydantic import BaseModel, Field


class ConfiguredRequest(BaseModel):
    config_text: str = ""
    seed: Optional[int] = None
    out: Optional[str] = None
    variant: Optional[str] = Field(
        default=None, description="override like 'upsampler=srm,context=crm'")


class HealthResponse(BaseModel):
    status: str
    version: str


class TrainRequest(ConfiguredRequest):
    pass


class TrainResponse(BaseModel):
    checkpoint: str
    metrics_csv: str
    out: str
    steps: int


class EvalRequest(ConfiguredRequest):
    checkpoint: Optional[str] = None
    oracle: bool = False
    dump: bool = False


class EvalResponse(BaseModel):
    per_class: List[Optional[float]]
    miou: float
    boundary_f_tol1: float
    boundary_f_tol3: float
    scenes: int
    csv: str


class GradcheckRequest(BaseModel):
    targets: Optional[List[str]] = None
    seed: int = 0
    corrupt: Optional[str] = None


class GradcheckRow(BaseModel):
    target: str
    max_rel_error: float
    passed: bool


class GradcheckResponse(BaseModel):
    rows: List[GradcheckRow]
    all_passed: bool
    threshold: float


class AblateRequest(ConfiguredRequest):
    pass


class AblateRow(BaseModel):
    variant: str
    upsampler: str
    context: str
    miou_mean: float
    miou_std: float
    bf1_mean: float
    bf1_std: float
    bf3_mean: float
    bf3_std: float


class AblateResponse(BaseModel):
    rows: List[AblateRow]
    csv: str
    table_path: str
    table_text: str
