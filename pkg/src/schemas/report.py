from typing import Dict, List

from pydantic import BaseModel, Field, field_validator

DEFAULT_THRESHOLDS: List[float] = [0.5, 1.0, 2.0, 4.0]


def threshold_key(thr: float) -> str:
    return f"{float(thr):g}"


class EvalReport(BaseModel):
    """评估报告（按中心距离匹配）"""
    thresholds: List[float] = Field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    class_names: List[str] = Field(default_factory=list)
    recall: Dict[str, Dict[str, float]] = Field(default_factory=dict, description="类别 → 阈值 → recall")
    ap: Dict[str, Dict[str, float]] = Field(default_factory=dict, description="类别 → 阈值 → AP")
    overall_recall: Dict[str, float] = Field(default_factory=dict, description="阈值 → 全类别 recall")
    mean_ap: float = Field(default=0.0, ge=0, le=1)
    query_hit_rate: List[float] = Field(default_factory=list, description="每个阶段 query 命中 GT 中心格的比例")
    stage_attribution: List[int] = Field(default_factory=list, description="2 m 阈值下每个阶段首先命中的 GT 数")
    loss_curve: List[float] = Field(default_factory=list)
    num_scenes: int = 0
    num_gt: int = 0
    num_predictions: int = 0
    n_queries: int = 0
    config: Dict = Field(default_factory=dict)

    @field_validator("query_hit_rate")
    @classmethod
    def _rates_in_unit(cls, v):
        if any(r < 0 or r > 1 for r in v):
            raise ValueError("query hit rates must lie in [0, 1]")
        return v

    @field_validator("recall", "ap")
    @classmethod
    def _nested_rates_in_unit(cls, v):
        for per_thr in v.values():
            if any(r < 0 or r > 1 for r in per_thr.values()):
                raise ValueError("recall / AP values must lie in [0, 1]")
        return v

    def recall_at(self, threshold: float) -> float:
        return self.overall_recall.get(threshold_key(threshold), 0.0)
