# src/services/checkpoint_store.py
"""
checkpoint 存储

<name>.npz   参数（按名字）
<name>.json  配置 + 元信息（步数、创建时间、最后的指标）
"""
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from src.models.detector import DetectorParams, init_detector_params
from src.schemas.train import TrainConfig
from src.utils import console
from src.utils.exceptions import CheckpointError


@dataclass
class CheckpointMeta:
    """checkpoint 元信息"""
    name: str
    created_at: str
    steps: int = 0
    config: Dict = field(default_factory=dict)
    metrics: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "CheckpointMeta":
        return cls(**data)


class CheckpointStore:
    """参数 + 配置的成对存取"""

    @staticmethod
    def _paths(path: Union[str, Path]) -> Tuple[Path, Path]:
        base = Path(path)
        if base.suffix in (".npz", ".json"):
            base = base.with_suffix("")
        return base.with_suffix(".npz"), base.with_suffix(".json")

    @staticmethod
    def save(
        path: Union[str, Path],
        params: DetectorParams,
        cfg: TrainConfig,
        steps: int = 0,
        metrics: Optional[Dict] = None,
    ) -> Path:
        npz_path, json_path = CheckpointStore._paths(path)
        npz_path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(npz_path, **params.state_dict())
        meta = CheckpointMeta(
            name=npz_path.stem,
            created_at=datetime.now().isoformat(),
            steps=steps,
            config=cfg.model_dump(mode="json"),
            metrics=metrics or {},
        )
        json_path.write_text(json.dumps(meta.to_dict(), indent=2, ensure_ascii=False), encoding="utf-8")
        console.info("checkpoint saved", {"path": str(npz_path), "steps": steps})
        return npz_path

    @staticmethod
    def load(path: Union[str, Path]) -> Tuple[DetectorParams, TrainConfig, CheckpointMeta]:
        """按 sidecar 里的配置重建参数结构，再按名字回填"""
        npz_path, json_path = CheckpointStore._paths(path)
        if not npz_path.exists() or not json_path.exists():
            raise CheckpointError(f"checkpoint not found: {npz_path}")
        try:
            meta = CheckpointMeta.from_dict(json.loads(json_path.read_text(encoding="utf-8")))
            cfg = TrainConfig.model_validate(meta.config)
        except (ValueError, TypeError) as e:
            raise CheckpointError(f"corrupt checkpoint metadata {json_path}: {e}") from e
        params = init_detector_params(cfg)
        with np.load(npz_path) as arrays:
            params.load_state_dict({k: arrays[k] for k in arrays.files})
        return params, cfg, meta

    @staticmethod
    def exists(path: Union[str, Path]) -> bool:
        npz_path, json_path = CheckpointStore._paths(path)
        return npz_path.exists() and json_path.exists()
