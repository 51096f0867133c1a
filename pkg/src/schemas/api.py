from typing import List, Optional

from pydantic import BaseModel, Field, field_validator

from src.schemas.detection import Box3D


class DetectRequest(BaseModel):
    """一帧点云：每个点 [x, y, z, intensity]"""
    points: List[List[float]] = Field(default_factory=list)
    checkpoint: Optional[str] = Field(default=None, description="为空时用 settings.CHECKPOINT_PATH")
    n_queries: Optional[int] = Field(default=None, ge=1)
    max_detections: Optional[int] = Field(default=None, ge=1)

    @field_validator("points")
    @classmethod
    def _four_columns(cls, v):
        for i, p in enumerate(v):
            if len(p) != 4:
                raise ValueError(f"point {i} has {len(p)} values, expected 4 (x, y, z, intensity)")
        return v


class DetectResponse(BaseModel):
    checkpoint: str
    num_points: int
    points_in_grid: int
    boxes: List[Box3D]
    count: int


class HealthResponse(BaseModel):
    status: str = "ok"
    checkpoint: Optional[str] = None
    loaded: bool = False
