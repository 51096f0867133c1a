# src/services/eval_service.py
"""
评估：按 BEV 中心距离贪心匹配，AP 取单调精度包络的全点积分

匹配规则（kd-tree 实现与暴力校验实现各自独立地遵守）:
    预测按分数降序（同分按输入顺序）处理；
    在同一场景、同一类别、尚未匹配且距离 ≤ 阈值的 GT 中取最近的，
    距离相同取下标最小的。
"""
import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from src.models.detector import DetectorParams, detector_forward
from src.models.head import boxes_from_outputs, query_dump_rows
from src.models.tensor import no_grad, save_tensor
from src.schemas.detection import BOX_CSV_FIELDS, QUERY_CSV_FIELDS
from src.schemas.report import DEFAULT_THRESHOLDS, EvalReport, threshold_key
from src.schemas.scene import CLASS_NAMES
from src.schemas.train import TrainConfig
from src.services.scene_store import SceneSample
from src.utils import console

ATTRIBUTION_THRESHOLD = 2.0
_RADIUS_SLACK = 1.0 + 1e-9


@dataclass
class Prediction:
    scene: int
    x: float
    y: float
    score: float
    class_id: int
    stage: int = -1


@dataclass
class GroundTruth:
    scene: int
    x: float
    y: float
    class_id: int


@dataclass
class MatchResult:
    """order: 处理顺序（预测下标）；tp / matched_gt 与 order 对齐"""
    order: np.ndarray
    tp: np.ndarray
    matched_gt: np.ndarray


def _score_order(preds: Sequence[Prediction]) -> np.ndarray:
    scores = np.array([p.score for p in preds], dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def _pick(candidates: Sequence[int], pred: Prediction, gts: Sequence[GroundTruth], taken: np.ndarray, threshold: float) -> int:
    best, best_d = -1, np.inf
    for j in sorted(candidates):
        if taken[j]:
            continue
        d = float(np.hypot(pred.x - gts[j].x, pred.y - gts[j].y))
        if d <= threshold and d < best_d:
            best, best_d = j, d
    return best


def match_predictions(preds: Sequence[Prediction], gts: Sequence[GroundTruth], threshold: float) -> MatchResult:
    """单类别贪心匹配（每个场景一棵 kd-tree）"""
    order = _score_order(preds)
    taken = np.zeros(len(gts), dtype=bool)
    by_scene: Dict[int, List[int]] = {}
    for j, g in enumerate(gts):
        by_scene.setdefault(g.scene, []).append(j)
    trees = {
        s: cKDTree(np.array([[gts[j].x, gts[j].y] for j in idx])) for s, idx in by_scene.items()
    }

    tp = np.zeros(len(order), dtype=bool)
    matched = np.full(len(order), -1, dtype=np.int64)
    for k, i in enumerate(order):
        p = preds[i]
        tree = trees.get(p.scene)
        if tree is None:
            continue
        local = tree.query_ball_point([p.x, p.y], r=threshold * _RADIUS_SLACK)
        j = _pick([by_scene[p.scene][m] for m in local], p, gts, taken, threshold)
        if j >= 0:
            taken[j] = True
            tp[k] = True
            matched[k] = j
    return MatchResult(order=order, tp=tp, matched_gt=matched)


def brute_force_match(preds: Sequence[Prediction], gts: Sequence[GroundTruth], threshold: float) -> MatchResult:
    """O(n²) 全配对，纯 Python 循环的独立实现，只用于校验 match_predictions"""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    used = set()
    tp, matched = [], []
    for i in order:
        p = preds[i]
        best = None
        for j, g in enumerate(gts):
            if j in used or g.scene != p.scene:
                continue
            d = math.hypot(p.x - g.x, p.y - g.y)
            if d > threshold:
                continue
            if best is None or d < best[1]:
                best = (j, d)
        if best is None:
            tp.append(False)
            matched.append(-1)
        else:
            used.add(best[0])
            tp.append(True)
            matched.append(best[0])
    return MatchResult(
        order=np.array(order, dtype=np.int64),
        tp=np.array(tp, dtype=bool),
        matched_gt=np.array(matched, dtype=np.int64),
    )


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """全点插值：精度先做从右向左的单调包络，再对 recall 增量求和"""
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


@dataclass
class MapResult:
    ap: Dict[int, Dict[str, float]]
    recall: Dict[int, Dict[str, float]]
    mean_ap: float
    matched: Dict[str, int]
    attribution_matches: List[Tuple[int, int]]  # (预测下标, GT 下标) @ 2 m


def compute_map(
    preds: Sequence[Prediction],
    gts: Sequence[GroundTruth],
    num_classes: int,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> MapResult:
    """
    按类别、阈值计算 AP / recall

    没有 GT 的类别不计入 mAP；完全没有 GT 时 mAP 为 0
    """
    ap: Dict[int, Dict[str, float]] = {}
    recall: Dict[int, Dict[str, float]] = {}
    matched_total = {threshold_key(t): 0 for t in thresholds}
    attribution: List[Tuple[int, int]] = []
    for c in range(num_classes):
        p_idx = [i for i, p in enumerate(preds) if p.class_id == c]
        g_idx = [j for j, g in enumerate(gts) if g.class_id == c]
        cp = [preds[i] for i in p_idx]
        cg = [gts[j] for j in g_idx]
        ap[c], recall[c] = {}, {}
        for thr in thresholds:
            key = threshold_key(thr)
            m = match_predictions(cp, cg, thr)
            n_tp = int(m.tp.sum())
            ap[c][key] = average_precision(m.tp, len(cg))
            recall[c][key] = n_tp / len(cg) if cg else 0.0
            matched_total[key] += n_tp
            if thr == ATTRIBUTION_THRESHOLD:
                attribution.extend(
                    (p_idx[int(m.order[k])], g_idx[int(m.matched_gt[k])]) for k in np.nonzero(m.tp)[0]
                )
    with_gt = [c for c in range(num_classes) if any(g.class_id == c for g in gts)]
    if with_gt:
        mean_ap = float(np.mean([np.mean([ap[c][threshold_key(t)] for t in thresholds]) for c in with_gt]))
    else:
        mean_ap = 0.0
    return MapResult(ap=ap, recall=recall, mean_ap=mean_ap, matched=matched_total, attribution_matches=attribution)


def brute_force_map(
    preds: Sequence[Prediction],
    gts: Sequence[GroundTruth],
    num_classes: int,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> float:
    """
    mAP 的独立实现：逐类逐阈值调用 brute_force_match，
    AP 直接按“每个 TP 处右侧最大精度 / GT 数”累加
    """
    per_class = []
    for c in range(num_classes):
        cp = [p for p in preds if p.class_id == c]
        cg = [g for g in gts if g.class_id == c]
        if not cg:
            continue
        aps = []
        for thr in thresholds:
            hits = [bool(h) for h in brute_force_match(cp, cg, thr).tp]
            precisions, n_tp = [], 0
            for k, hit in enumerate(hits, start=1):
                n_tp += hit
                precisions.append(n_tp / k)
            best_right, ap = 0.0, 0.0
            for k in range(len(hits) - 1, -1, -1):
                best_right = max(best_right, precisions[k])
                if hits[k]:
                    ap += best_right / len(cg)
            aps.append(ap)
        per_class.append(sum(aps) / len(aps))
    return sum(per_class) / len(per_class) if per_class else 0.0


# ============ 报告 ============

def _write_csv(path: Path, header: List[str], rows: List[List]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def save_report(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")
    return path


class EvalService:
    """评估入口"""

    @staticmethod
    def evaluate(
        params: DetectorParams,
        cfg: TrainConfig,
        dataset: Sequence[SceneSample],
        n_queries: Optional[int] = None,
        max_detections: Optional[int] = None,
        loss_curve: Optional[List[float]] = None,
        dump_detections: Optional[Union[str, Path]] = None,
        dump_features: Optional[Union[str, Path]] = None,
        thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    ) -> EvalReport:
        """
        在数据集上评估

        Args:
            n_queries: 测试时覆盖每阶段的 query 数（不需要重新训练）
            max_detections: 每个场景保留的最高分框数
            dump_detections: 每个场景写 detections / queries 两个 CSV
            dump_features: 每个场景写 F0 与各阶段增强特征
        """
        n_queries = n_queries or cfg.n_queries
        cap = max_detections or cfg.max_detections
        preds: List[Prediction] = []
        gts: List[GroundTruth] = []
        stage_queries = np.zeros(cfg.k_stages, dtype=np.int64)
        stage_hits = np.zeros(cfg.k_stages, dtype=np.int64)

        for s_idx, sample in enumerate(dataset):
            for box in sample.scene.boxes:
                gts.append(GroundTruth(s_idx, box.center[0], box.center[1], box.class_id))
            with no_grad():
                out = detector_forward(sample.stats, params, cfg, n_queries=n_queries)
            queries = out.queries

            gt_cells = {cfg.grid.cell_of(b.center[0], b.center[1]) for b in sample.scene.boxes}
            for q in queries:
                stage_queries[q.stage] += 1
                stage_hits[q.stage] += (q.row, q.col) in gt_cells

            boxes = []
            if out.query_out is not None:
                boxes = boxes_from_outputs(queries, out.query_out.reg.data, out.query_out.refined_scores(), cfg.grid)
            keep = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))[:cap]
            for i in keep:
                b = boxes[i]
                preds.append(Prediction(s_idx, b.center[0], b.center[1], b.score, b.class_id, queries[i].stage))

            if dump_detections:
                root = Path(dump_detections)
                _write_csv(root / f"{sample.name}_detections.csv", BOX_CSV_FIELDS, [boxes[i].to_row() for i in keep])
                _write_csv(root / f"{sample.name}_queries.csv", QUERY_CSV_FIELDS, query_dump_rows(queries))
            if dump_features:
                root = Path(dump_features)
                root.mkdir(parents=True, exist_ok=True)
                save_tensor(out.f0, root / f"{sample.name}_f0.bin")
                for st in out.multistage.stages:
                    save_tensor(st.feature, root / f"{sample.name}_stage{st.index}.bin")

        result = compute_map(preds, gts, cfg.num_classes, thresholds)
        attribution = [0] * cfg.k_stages
        for p_i, _ in result.attribution_matches:
            attribution[preds[p_i].stage] += 1

        names = [CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}" for c in range(cfg.num_classes)]
        report = EvalReport(
            thresholds=list(thresholds),
            class_names=names,
            recall={names[c]: v for c, v in result.recall.items()},
            ap={names[c]: v for c, v in result.ap.items()},
            overall_recall={k: (v / len(gts) if gts else 0.0) for k, v in result.matched.items()},
            mean_ap=result.mean_ap,
            query_hit_rate=[float(h / q) if q else 0.0 for h, q in zip(stage_hits, stage_queries)],
            stage_attribution=attribution,
            loss_curve=list(loss_curve or []),
            num_scenes=len(dataset),
            num_gt=len(gts),
            num_predictions=len(preds),
            n_queries=n_queries,
            config=cfg.summary(),
        )
        console.metric(
            "evaluation",
            {"mAP": round(report.mean_ap, 4), "recall@2m": round(report.recall_at(2.0), 4), "scenes": len(dataset)},
        )
        return report
