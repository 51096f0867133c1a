import itertools
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, Field, field_validator

from src.models.head import StageMode
from src.models.lge import LgeVariant
from src.schemas.scene import CLASS_NAMES, GridSpec, SceneSpec


class LgeConfig(BaseModel):
    variant: LgeVariant = LgeVariant.G
    iterations: int = Field(default=4, ge=1)
    num_heads: int = Field(default=4, ge=1)


class TrainConfig(BaseModel):
    """一次实验的全部配置；JSON 文件 + --key=value 覆盖"""
    # 模型
    lge: LgeConfig = Field(default_factory=LgeConfig)
    channels: int = Field(default=32, ge=4)
    num_classes: int = Field(default=len(CLASS_NAMES), ge=1)
    k_stages: int = Field(default=3, ge=1)
    n_queries: int = Field(default=200, ge=1)
    mode: StageMode = StageMode.PARALLEL
    pool_kernel: int = Field(default=3, ge=1)
    window_radius: int = Field(default=3, ge=0)
    max_detections: int = Field(default=300, ge=1)

    # 数据
    grid: GridSpec = Field(default_factory=GridSpec)
    scene: SceneSpec = Field(default_factory=SceneSpec)
    train_scenes: int = Field(default=500, ge=1)
    eval_scenes: int = Field(default=100, ge=1)

    # 优化
    lr: float = Field(default=1e-4, gt=0, description="one-cycle 的峰值学习率")
    pct_start: float = Field(default=0.4, gt=0, lt=1)
    steps: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=1, ge=1)
    weight_decay: float = Field(default=0.01, ge=0)
    rms_beta: float = Field(default=0.999, gt=0, lt=1)
    box_weight: float = Field(default=0.25, ge=0)
    query_cls_weight: float = Field(default=1.0, ge=0)
    phase1_steps: int = Field(default=0, ge=0)
    freeze_backbone_phase2: bool = False
    log_every: int = Field(default=10, ge=1)
    seed: int = 42

    @field_validator("channels")
    @classmethod
    def _channels_divisible(cls, v):
        if v % 4:
            raise ValueError(f"channels must be divisible by 4, got {v}")
        return v

    @field_validator("pool_kernel")
    @classmethod
    def _odd_kernel(cls, v):
        if v % 2 == 0:
            raise ValueError(f"pool_kernel must be odd, got {v}")
        return v

    def summary(self) -> Dict[str, Any]:
        return {
            "variant": self.lge.variant.value,
            "iterations": self.lge.iterations,
            "K": self.k_stages,
            "N": self.n_queries,
            "mode": self.mode.value,
            "seed": self.seed,
        }


# ============ 覆盖参数 ============

def parse_override_value(raw: str) -> Any:
    """能按 JSON 解析就解析，否则保留字符串"""
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, TypeError):
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """把 {"lge.variant": "B"} 这样的点号路径写进嵌套 dict（返回新 dict）"""
    out = json.loads(json.dumps(data))
    for dotted, value in overrides.items():
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"override '{dotted}' walks into a non-object field")
        node[parts[-1]] = value
    return out


def parse_override_args(args: List[str]) -> Dict[str, Any]:
    """["--lge.variant=B", "--steps=10"] → {"lge.variant": "B", "steps": 10}"""
    overrides: Dict[str, Any] = {}
    for arg in args:
        if not arg.startswith("--") or "=" not in arg:
            raise ValueError(f"expected --key=value, got '{arg}'")
        key, raw = arg[2:].split("=", 1)
        overrides[key.replace("-", "_")] = parse_override_value(raw)
    return overrides


def load_train_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> TrainConfig:
    data: Dict[str, Any] = {}
    if path:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    if overrides:
        data = apply_overrides(data, overrides)
    return TrainConfig.model_validate(data)


# ============ 消融网格 ============

class AblationGrid(BaseModel):
    """
    消融网格：axes 的笛卡尔积 × seeds

    例如 {"k_stages": [1, 2, 3], "mode": ["parallel", "cascaded"]} → 6 个单元
    """
    axes: Dict[str, List[Any]] = Field(default_factory=dict)
    seeds: List[int] = Field(default_factory=lambda: [42])
    base_overrides: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("axes")
    @classmethod
    def _non_empty_axes(cls, v):
        for key, values in v.items():
            if not values:
                raise ValueError(f"ablation axis '{key}' has no values")
        return v

    def cells(self) -> List[Dict[str, Any]]:
        keys = list(self.axes)
        combos = itertools.product(*(self.axes[k] for k in keys)) if keys else [()]
        out = []
        for combo in combos:
            for seed in self.seeds:
                cell = dict(self.base_overrides)
                cell.update(dict(zip(keys, combo)))
                cell["seed"] = seed
                out.append(cell)
        return out
