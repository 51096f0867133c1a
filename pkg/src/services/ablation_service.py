# src/services/ablation_service.py
"""
消融实验：对配置网格的每个单元训练 + 评估，每个单元写一行 CSV

单元失败（发散、容量不足等）记为 status=failed:<原因>，扫描继续。
"""
import csv
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import ValidationError

from src.schemas.report import DEFAULT_THRESHOLDS, threshold_key
from src.schemas.train import AblationGrid, TrainConfig, apply_overrides
from src.services.eval_service import EvalService
from src.services.scene_store import SceneStore
from src.services.train_service import TrainService
from src.utils import console
from src.utils.exceptions import WaveBevError

ABLATION_FIELDS: List[str] = (
    ["variant", "iterations", "K", "N", "mode", "seed"]
    + [f"recall@{threshold_key(t)}" for t in DEFAULT_THRESHOLDS]
    + ["mAP", "wall_time_s", "status"]
)


def _row_for(cfg: Optional[TrainConfig], cell: Dict[str, Any]) -> Dict[str, Any]:
    if cfg is not None:
        return dict(cfg.summary())
    # 配置本身不合法时，尽量从单元里取出可读的列
    return {
        "variant": cell.get("lge.variant", ""),
        "iterations": cell.get("lge.iterations", ""),
        "K": cell.get("k_stages", ""),
        "N": cell.get("n_queries", ""),
        "mode": cell.get("mode", ""),
        "seed": cell.get("seed", ""),
    }


class AblationService:
    """消融扫描"""

    @staticmethod
    def run_cell(base: TrainConfig, cell: Dict[str, Any], data_dir: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
        started = time.perf_counter()
        cfg: Optional[TrainConfig] = None
        row: Dict[str, Any] = {}
        try:
            cfg = TrainConfig.model_validate(apply_overrides(base.model_dump(mode="json"), cell))
            row = _row_for(cfg, cell)
            train_set = SceneStore.dataset_for(cfg, "train", data_dir)
            eval_set = SceneStore.dataset_for(cfg, "eval", data_dir)
            result = TrainService.train(cfg, train_set)
            report = EvalService.evaluate(result.params, cfg, eval_set, loss_curve=result.loss_curve())
            for t in DEFAULT_THRESHOLDS:
                row[f"recall@{threshold_key(t)}"] = round(report.recall_at(t), 6)
            row["mAP"] = round(report.mean_ap, 6)
            row["status"] = "ok"
        except (WaveBevError, FloatingPointError, ValidationError) as e:
            row = {**_row_for(cfg, cell), **{k: v for k, v in row.items() if k.startswith("recall") or k == "mAP"}}
            row["status"] = f"failed:{type(e).__name__}: {str(e).splitlines()[0]}"
            console.error("ablation cell failed", {"cell": cell, "error": str(e)[:200]})
        row["wall_time_s"] = round(time.perf_counter() - started, 2)
        return row

    @staticmethod
    def run(
        grid: AblationGrid,
        base: TrainConfig,
        out_csv: Union[str, Path],
        data_dir: Optional[Union[str, Path]] = None,
    ) -> List[Dict[str, Any]]:
        """
        执行整个网格

        CSV 在每个单元完成后追加写入，中途中断时已完成的行保留。
        """
        cells = grid.cells()
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        console.start("ablation sweep", {"cells": len(cells), "csv": str(out_csv)})

        rows: List[Dict[str, Any]] = []
        with out_csv.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, restval="")
            writer.writeheader()
            for i, cell in enumerate(cells):
                console.section(f"cell {i + 1}/{len(cells)}: {cell}")
                row = AblationService.run_cell(base, cell, data_dir)
                writer.writerow(row)
                fh.flush()
                rows.append(row)

        failed = sum(1 for r in rows if r["status"] != "ok")
        console.info("ablation finished", {"rows": len(rows), "failed": failed})
        return rows
