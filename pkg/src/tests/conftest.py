# src/tests/conftest.py

import os
import sys

import pytest

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from src.schemas.train import TrainConfig  # noqa: E402

RUN_SLOW = os.getenv("WAVEBEV_RUN_SLOW") == "1"


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set WAVEBEV_RUN_SLOW=1 to run acceptance benchmarks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_tiny_config(**overrides) -> TrainConfig:
    """16×16 网格、8 通道的小配置，单测里几秒内跑完"""
    data = {
        "lge": {"variant": "G", "iterations": 1, "num_heads": 2},
        "channels": 8,
        "k_stages": 2,
        "n_queries": 6,
        "window_radius": 1,
        "max_detections": 20,
        "grid": {"origin": [-4.8, -4.8], "cell_size": 0.6, "extents": [16, 16]},
        "scene": {"num_objects": 2, "class_mix": {"pedestrian": 0.5, "barrier": 0.5}, "clutter_rate": 20},
        "train_scenes": 3,
        "eval_scenes": 2,
        "lr": 1e-3,
        "steps": 2,
        "log_every": 1,
        "seed": 7,
    }
    data.update(overrides)
    return TrainConfig.model_validate(data)


@pytest.fixture
def tiny_cfg() -> TrainConfig:
    return make_tiny_config()
