# src/tests/test_acceptance.py
"""
桌面规模基准上的整体验收（耗时长，WAVEBEV_RUN_SLOW=1 时才运行）
"""
import statistics
from pathlib import Path

import pytest

from src.models.detector import detector_forward, init_detector_params
from src.models.head import StageMode
from src.schemas.train import load_train_config
from src.services.eval_service import EvalService
from src.services.scene_store import SceneStore
from src.services.train_service import TrainService

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"
SEEDS = (42, 43, 44)

pytestmark = pytest.mark.slow


def _benchmark(**overrides):
    return load_train_config(CONFIG_DIR / "benchmark.json", overrides)


@pytest.fixture(scope="module")
def benchmark_data():
    cfg = _benchmark()
    return SceneStore.dataset_for(cfg, "train"), SceneStore.dataset_for(cfg, "eval")


@pytest.fixture(scope="module")
def trained_g(benchmark_data, tmp_path_factory):
    cfg = _benchmark()
    train_set, _ = benchmark_data
    return cfg, TrainService.train(cfg, train_set, output_dir=tmp_path_factory.mktemp("g"))


def _train_eval(overrides, benchmark_data, out_dir):
    cfg = _benchmark(**overrides)
    train_set, eval_set = benchmark_data
    result = TrainService.train(cfg, train_set, output_dir=out_dir)
    return EvalService.evaluate(result.params, cfg, eval_set)


def test_training_signal(trained_g, benchmark_data):
    cfg, result = trained_g
    _, eval_set = benchmark_data
    untrained = EvalService.evaluate(init_detector_params(cfg), cfg, eval_set)
    trained = EvalService.evaluate(result.params, cfg, eval_set, loss_curve=result.loss_curve())
    assert trained.recall_at(2.0) - untrained.recall_at(2.0) >= 0.3

    early = result.moving_average(50)
    late = result.moving_average(cfg.steps - 1)
    assert late <= 0.4 * early


def test_more_queries_at_test_time_is_prefix_stable(trained_g, benchmark_data):
    cfg, result = trained_g
    _, eval_set = benchmark_data
    assert cfg.mode == StageMode.PARALLEL
    report = EvalService.evaluate(result.params, cfg, eval_set, n_queries=2 * cfg.n_queries)
    assert report.n_queries == 2 * cfg.n_queries

    for sample in eval_set:
        base = detector_forward(sample.stats, result.params, cfg).multistage.stages[0].queries
        wide = detector_forward(sample.stats, result.params, cfg, n_queries=2 * cfg.n_queries).multistage.stages[0].queries
        assert [q.cell for q in wide[: len(base)]] == [q.cell for q in base]


def test_three_stages_recall_at_least_one_stage(benchmark_data, tmp_path):
    one = [_train_eval({"k_stages": 1, "seed": s}, benchmark_data, tmp_path).recall_at(2.0) for s in SEEDS]
    three = [_train_eval({"k_stages": 3, "seed": s}, benchmark_data, tmp_path).recall_at(2.0) for s in SEEDS]
    assert statistics.median(three) >= statistics.median(one)


def test_variant_g_map_at_least_variant_b(benchmark_data, tmp_path):
    g = [_train_eval({"lge.variant": "G", "seed": s}, benchmark_data, tmp_path).mean_ap for s in SEEDS]
    b = [_train_eval({"lge.variant": "B", "seed": s}, benchmark_data, tmp_path).mean_ap for s in SEEDS]
    assert statistics.median(g) >= statistics.median(b)
