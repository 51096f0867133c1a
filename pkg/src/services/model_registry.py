# src/services/model_registry.py
"""
已加载 checkpoint 的进程内缓存（HTTP 接口用）
"""
from dataclasses import dataclass
from pathlib import Path
from threading import Lock
from typing import Dict, Optional

from src.models.detector import DetectorParams
from src.schemas.train import TrainConfig
from src.services.checkpoint_store import CheckpointMeta, CheckpointStore
from src.services.config import settings
from src.utils import console
from src.utils.exceptions import CheckpointError


@dataclass
class LoadedModel:
    path: str
    params: DetectorParams
    cfg: TrainConfig
    meta: CheckpointMeta


class ModelRegistry:
    """按路径缓存；参数只读，多个请求共享"""

    def __init__(self):
        self._models: Dict[str, LoadedModel] = {}
        self._lock = Lock()

    def resolve(self, path: Optional[str] = None) -> str:
        path = path or settings.CHECKPOINT_PATH
        if not path:
            raise CheckpointError("no checkpoint given and CHECKPOINT_PATH is not set")
        return str(Path(path).with_suffix("")) if Path(path).suffix in (".npz", ".json") else str(path)

    def get(self, path: Optional[str] = None) -> LoadedModel:
        key = self.resolve(path)
        with self._lock:
            model = self._models.get(key)
            if model is None:
                params, cfg, meta = CheckpointStore.load(key)
                model = LoadedModel(path=key, params=params, cfg=cfg, meta=meta)
                self._models[key] = model
                console.info("checkpoint loaded", {"path": key, "steps": meta.steps})
        return model

    def is_loaded(self, path: Optional[str] = None) -> bool:
        try:
            return self.resolve(path) in self._models
        except CheckpointError:
            return False

    def clear(self) -> None:
        with self._lock:
            self._models.clear()


# 单例
model_registry = ModelRegistry()
