import math
from typing import List, Tuple

from pydantic import BaseModel, Field, field_validator


class Box3D(BaseModel):
    """有向 3D 框（BEV 中心 + 尺寸 + 航向）"""
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    yaw: float = Field(..., ge=-math.pi, lt=math.pi)
    class_id: int = Field(..., ge=0)
    score: float = Field(default=1.0, ge=0, le=1)

    @field_validator("size")
    @classmethod
    def _positive_size(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError(f"box size must be strictly positive, got {v}")
        return v

    @property
    def x(self) -> float:
        return self.center[0]

    @property
    def y(self) -> float:
        return self.center[1]

    def to_row(self) -> List[float]:
        """cx, cy, cz, l, w, h, yaw, class_id, score"""
        return [*self.center, *self.size, self.yaw, float(self.class_id), self.score]

    @classmethod
    def from_row(cls, row) -> "Box3D":
        vals = [float(v) for v in row]
        return cls(
            center=tuple(vals[0:3]),
            size=tuple(vals[3:6]),
            yaw=vals[6],
            class_id=int(round(vals[7])),
            score=vals[8],
        )


BOX_CSV_FIELDS = ["cx", "cy", "cz", "l", "w", "h", "yaw", "class_id", "score"]
QUERY_CSV_FIELDS = ["stage", "row", "col", "class", "score"]


def wrap_yaw(yaw: float) -> float:
    """映射到 [−π, π)"""
    wrapped = math.atan2(math.sin(yaw), math.cos(yaw))
    return -math.pi if wrapped >= math.pi else wrapped
