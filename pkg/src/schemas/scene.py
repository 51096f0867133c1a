from enum import Enum
from typing import Dict, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class Difficulty(str, Enum):
    EASY = "easy"
    WEAK = "weak"


# 类别顺序即热力图通道顺序
CLASS_NAMES: Tuple[str, ...] = ("vehicle", "pedestrian", "barrier")

# (l, w, h) 米
CLASS_SIZES: Dict[str, Tuple[float, float, float]] = {
    "vehicle": (4.2, 1.8, 1.6),
    "pedestrian": (0.7, 0.7, 1.75),
    "barrier": (2.0, 0.5, 1.0),
}


class GridSpec(BaseModel):
    """BEV 网格：行对应 y，列对应 x"""
    origin: Tuple[float, float] = (-19.2, -19.2)
    cell_size: float = Field(default=0.6, gt=0)
    extents: Tuple[int, int] = (64, 64)
    z_range: Tuple[float, float] = (-1.0, 3.0)

    @field_validator("extents")
    @classmethod
    def _even_extents(cls, v):
        h, w = v
        if h <= 0 or w <= 0 or h % 2 or w % 2:
            raise ValueError(f"grid extents must be positive and even, got {v}")
        return v

    @field_validator("z_range")
    @classmethod
    def _ordered_z(cls, v):
        if v[0] >= v[1]:
            raise ValueError(f"z_range must be increasing, got {v}")
        return v

    @property
    def height(self) -> int:
        return self.extents[0]

    @property
    def width(self) -> int:
        return self.extents[1]

    @property
    def x_max(self) -> float:
        return self.origin[0] + self.width * self.cell_size

    @property
    def y_max(self) -> float:
        return self.origin[1] + self.height * self.cell_size

    def contains_xy(self, x: float, y: float) -> bool:
        return self.origin[0] <= x < self.x_max and self.origin[1] <= y < self.y_max

    def cell_of(self, x: float, y: float) -> Optional[Tuple[int, int]]:
        """(row, col)，网格外返回 None"""
        if not self.contains_xy(x, y):
            return None
        col = int((x - self.origin[0]) // self.cell_size)
        row = int((y - self.origin[1]) // self.cell_size)
        return min(row, self.height - 1), min(col, self.width - 1)

    def cell_center(self, row: int, col: int) -> Tuple[float, float]:
        return (
            self.origin[0] + (col + 0.5) * self.cell_size,
            self.origin[1] + (row + 0.5) * self.cell_size,
        )


class SceneSpec(BaseModel):
    """合成场景参数"""
    num_objects: int = Field(default=8, ge=0, le=64)
    class_mix: Dict[str, float] = Field(
        default_factory=lambda: {"vehicle": 0.5, "pedestrian": 0.3, "barrier": 0.2}
    )
    weak_fraction: float = Field(default=0.4, ge=0, le=1, description="weak 目标所占比例")
    easy_density: float = Field(default=12.0, gt=0, description="距离 0 处每平方米点数")
    weak_density: float = Field(default=3.0, gt=0)
    density_falloff_m: float = Field(default=10.0, gt=0)
    max_points_per_object: int = Field(default=512, ge=1)
    clutter_rate: float = Field(default=200.0, ge=0, description="背景杂点的泊松期望")
    surface_noise_m: float = Field(default=0.02, ge=0)
    max_retries: int = Field(default=100, ge=1)
    seed: int = 42

    @field_validator("class_mix")
    @classmethod
    def _known_classes(cls, v):
        unknown = set(v) - set(CLASS_NAMES)
        if unknown:
            raise ValueError(f"unknown classes in class_mix: {sorted(unknown)}")
        if not v or sum(v.values()) <= 0 or any(w < 0 for w in v.values()):
            raise ValueError("class_mix weights must be non-negative with a positive sum")
        return v

    @model_validator(mode="after")
    def _weak_not_denser(self):
        if self.weak_density > self.easy_density:
            raise ValueError("weak_density must not exceed easy_density")
        return self

    def class_probabilities(self) -> Tuple[float, ...]:
        weights = [self.class_mix.get(name, 0.0) for name in CLASS_NAMES]
        total = sum(weights)
        return tuple(w / total for w in weights)
