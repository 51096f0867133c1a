# src/services/train_service.py
"""
损失、优化器与训练循环
"""
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.models import ops
from src.models.detector import DetectorOutput, DetectorParams, detector_forward, init_detector_params
from src.models.head import Heatmap, Query, encode_box_target, stage_targets
from src.models.tensor import Tape, Tensor, backward, tensor
from src.schemas.detection import Box3D
from src.schemas.scene import GridSpec
from src.schemas.train import TrainConfig
from src.services.config import settings
from src.services.scene_store import SceneSample
from src.utils import console
from src.utils.exceptions import NonFiniteError, TrainingDivergedError
from src.utils.lr_schedule import create_schedule

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0


# ============ 损失 ============

def focal_loss(pred: Union[Heatmap, Tensor], target: np.ndarray) -> Tensor:
    """
    惩罚衰减的 focal loss（从 logits 计算，数值稳定）

    正样本 (target == 1): −(1−p)^α · log p
    负样本: −(1−t)^β · p^α · log(1−p)
    按正样本数归一化（至少为 1）
    """
    logits = pred.logits if isinstance(pred, Heatmap) else pred
    target = np.asarray(target)
    if logits.shape != target.shape:
        raise ValueError(f"focal_loss: prediction {logits.shape} vs target {target.shape}")
    dtype = logits.dtype
    pos = (target == 1.0).astype(dtype)
    neg_weight = (np.power(1.0 - target, FOCAL_BETA) * (1.0 - pos)).astype(dtype)
    num_pos = max(1.0, float(pos.sum()))

    p = ops.sigmoid(logits)
    log_p = ops.neg(ops.softplus(ops.neg(logits)))
    log_1mp = ops.neg(ops.softplus(logits))
    pos_term = ops.sum(ops.power(1.0 - p, FOCAL_ALPHA) * log_p * tensor(pos, dtype=dtype))
    neg_term = ops.sum(ops.power(p, FOCAL_ALPHA) * log_1mp * tensor(neg_weight, dtype=dtype))
    return ops.neg(pos_term + neg_term) * (1.0 / num_pos)


def box_loss(pred_reg: Tensor, rows: Sequence[int], targets: np.ndarray) -> Optional[Tensor]:
    """
    匹配上的 query 的 8 维回归 L1，按框平均；没有匹配时返回 None
    """
    if len(rows) == 0:
        return None
    picked = ops.gather_rows(pred_reg, rows)
    diff = ops.abs(picked - tensor(np.asarray(targets).reshape(len(rows), -1), dtype=pred_reg.dtype))
    return ops.sum(diff) * (1.0 / len(rows))


def match_gt_to_queries(
    boxes: Sequence[Box3D],
    queries: Sequence[Query],
    grid: GridSpec,
) -> Tuple[List[int], np.ndarray]:
    """
    GT 中心所在格子恰好被某个 query 选中时配对

    Returns:
        (query 下标, 对应的回归目标 M×8)
    """
    by_cell = {(q.row, q.col): i for i, q in enumerate(queries)}
    rows, targets = [], []
    for box in boxes:
        cell = grid.cell_of(box.center[0], box.center[1])
        if cell is None or cell not in by_cell:
            continue
        rows.append(by_cell[cell])
        targets.append(encode_box_target(box, cell[0], cell[1], grid))
    return rows, np.array(targets).reshape(-1, 8)


def query_class_targets(boxes: Sequence[Box3D], queries: Sequence[Query], grid: GridSpec) -> np.ndarray:
    """query 所在格子里有同类 GT 中心时为 1"""
    hits = set()
    for box in boxes:
        cell = grid.cell_of(box.center[0], box.center[1])
        if cell is not None:
            hits.add((cell[0], cell[1], box.class_id))
    return np.array([1.0 if (q.row, q.col, q.class_id) in hits else 0.0 for q in queries])


@dataclass
class LossBreakdown:
    total: Tensor
    heatmap: float
    box: float
    query: float


def detector_loss(
    out: DetectorOutput,
    sample: SceneSample,
    cfg: TrainConfig,
    stages: Optional[Sequence[int]] = None,
) -> LossBreakdown:
    """
    Σ_stages focal(stage 热力图, gt × stage 掩码) + λ·box + w·query 分类

    stages 给出时只计这些阶段的热力图损失（两阶段训练的第一阶段只用 stage 0）
    """
    stages = range(len(out.multistage.stages)) if stages is None else stages
    heat = None
    for i in stages:
        st = out.multistage.stages[i]
        term = focal_loss(st.heatmap, stage_targets(sample.targets, st.mask_before))
        heat = term if heat is None else heat + term
    total = heat
    box_val = query_val = 0.0

    if out.query_out is not None:
        rows, targets = match_gt_to_queries(sample.scene.boxes, out.queries, cfg.grid)
        bl = box_loss(out.query_out.reg, rows, targets)
        if bl is not None and cfg.box_weight > 0:
            total = total + bl * cfg.box_weight
            box_val = bl.item()
        if cfg.query_cls_weight > 0:
            qt = query_class_targets(sample.scene.boxes, out.queries, cfg.grid)
            ql = focal_loss(out.query_out.refined_logit, qt)
            total = total + ql * cfg.query_cls_weight
            query_val = ql.item()
    return LossBreakdown(total=total, heatmap=heat.item(), box=box_val, query=query_val)


# ============ 优化器 ============

class RmsPropOptimizer:
    """
    无动量的自适应一阶方法：平方梯度滑动平均（带偏差修正）+ 解耦权重衰减
    """

    def __init__(self, beta: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.beta = beta
        self.eps = eps
        self.weight_decay = weight_decay
        self._sq: Dict[int, np.ndarray] = {}
        self._t: Dict[int, int] = {}

    def step(self, params: Sequence[Tensor], lr: float) -> int:
        """更新带梯度的参数，返回更新个数"""
        updated = 0
        for p in params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NonFiniteError("optimizer", f"(gradient of {p.name or 'parameter'})")
            key = id(p)
            t = self._t.get(key, 0) + 1
            sq = self.beta * self._sq.get(key, np.zeros_like(g)) + (1.0 - self.beta) * g * g
            self._sq[key], self._t[key] = sq, t
            sq_hat = sq / (1.0 - self.beta ** t)
            new = p.data * (1.0 - lr * self.weight_decay) - lr * g / (np.sqrt(sq_hat) + self.eps)
            p.assign(new)
            updated += 1
        return updated


# ============ 训练 ============

@dataclass
class MetricRecord:
    step: int
    loss: float
    heatmap_loss: float
    box_loss: float
    query_loss: float
    lr: float
    phase: int

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: DetectorParams
    metric_log: List[MetricRecord] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0

    def loss_curve(self) -> List[float]:
        return [m.loss for m in self.metric_log]

    def moving_average(self, step: int, window: int = 20) -> Optional[float]:
        """以 step 结尾的窗口平均"""
        vals = [m.loss for m in self.metric_log if step - window < m.step <= step]
        return float(np.mean(vals)) if vals else None


def trainable_parameters(params: DetectorParams, cfg: TrainConfig, step: int) -> Tuple[int, List[Tensor]]:
    """
    两阶段训练

    phase 1 (step < phase1_steps): stem + stage 0 (LGE、热力图头) + 解码器
    phase 2: 全部；freeze_backbone_phase2 时冻结 stem
    """
    if step < cfg.phase1_steps:
        return 1, params.stem.parameters() + params.stage_parameters(0) + params.decoder.parameters()
    trainable = []
    if not cfg.freeze_backbone_phase2:
        trainable += params.stem.parameters()
    for i in range(cfg.k_stages):
        trainable += params.stage_parameters(i)
    return 2, trainable + params.decoder.parameters()


def _set_trainable(params: DetectorParams, trainable: List[Tensor]) -> None:
    wanted = {id(t) for t in trainable}
    for t in params.parameters():
        t.requires_grad = id(t) in wanted
        t.zero_grad()


def _dump_diverged_batch(batch: Sequence[SceneSample], step: int, lr: float, output_dir: Path) -> str:
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / f"diverged_step{step:06d}.npz"
    arrays = {f"{s.name}.stats": s.stats for s in batch}
    arrays.update({f"{s.name}.targets": s.targets for s in batch})
    arrays.update({f"{s.name}.points": s.scene.points.points for s in batch})
    np.savez(path, step=step, lr=lr, **arrays)
    return str(path)


class TrainService:
    """训练入口"""

    @staticmethod
    def batch_order(num_samples: int, steps: int, batch_size: int, seed: int) -> List[List[int]]:
        """确定性的 batch 顺序：每个 epoch 重新打乱"""
        rng = np.random.default_rng(seed)
        order: List[int] = []
        while len(order) < steps * batch_size:
            order.extend(int(i) for i in rng.permutation(num_samples))
        return [order[i * batch_size:(i + 1) * batch_size] for i in range(steps)]

    @staticmethod
    def train(
        cfg: TrainConfig,
        dataset: Sequence[SceneSample],
        params: Optional[DetectorParams] = None,
        output_dir: Optional[Union[str, Path]] = None,
    ) -> TrainResult:
        """
        训练检测器

        Raises:
            ValueError: 数据集为空
            TrainingDivergedError: 出现 NaN / Inf（附带该 batch 的诊断文件）
        """
        if not dataset:
            raise ValueError("training dataset is empty")
        params = params if params is not None else init_detector_params(cfg)
        output_dir = Path(output_dir) if output_dir else settings.output_path
        schedule = create_schedule(cfg.lr, cfg.steps, cfg.pct_start)
        optimizer = RmsPropOptimizer(beta=cfg.rms_beta, weight_decay=cfg.weight_decay)
        result = TrainResult(params=params)
        batches = TrainService.batch_order(len(dataset), cfg.steps, cfg.batch_size, cfg.seed)

        console.start("training", {**cfg.summary(), "steps": cfg.steps, "scenes": len(dataset)})
        console.debug("lr schedule", schedule.get_summary())
        if cfg.lge.variant.value == "E":
            console.warn("variant E is known to be non-convergent; divergence will be reported")
        started = time.perf_counter()
        current_phase = None

        for step, idx in enumerate(batches):
            phase, trainable = trainable_parameters(params, cfg, step)
            if phase != current_phase:
                _set_trainable(params, trainable)
                if current_phase is not None:
                    console.info(f"phase {phase} starts", {"step": step, "trainable": len(trainable)})
                current_phase = phase
            lr = schedule.step(step)
            batch = [dataset[i] for i in idx]
            loss_stages = [0] if phase == 1 else None
            try:
                with Tape():
                    parts = []
                    for sample in batch:
                        out = detector_forward(sample.stats, params, cfg)
                        parts.append(detector_loss(out, sample, cfg, stages=loss_stages))
                    total = parts[0].total
                    for part in parts[1:]:
                        total = total + part.total
                    if len(parts) > 1:
                        total = total * (1.0 / len(parts))
                backward(total)
                optimizer.step(trainable, lr)
            except (NonFiniteError, FloatingPointError) as e:
                dump = _dump_diverged_batch(batch, step, lr, output_dir)
                console.error("training diverged", {"step": step, "dump": dump})
                raise TrainingDivergedError(step, dump_path=dump, reason=str(e)) from e

            record = MetricRecord(
                step=step,
                loss=float(total.item()),
                heatmap_loss=float(np.mean([p.heatmap for p in parts])),
                box_loss=float(np.mean([p.box for p in parts])),
                query_loss=float(np.mean([p.query for p in parts])),
                lr=lr,
                phase=phase,
            )
            result.metric_log.append(record)
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                console.metric(
                    f"step {step}",
                    {"loss": round(record.loss, 5), "heatmap": round(record.heatmap_loss, 5),
                     "box": round(record.box_loss, 5), "lr": f"{lr:.3e}"},
                )

        for t in params.parameters():
            t.requires_grad = True
            t.zero_grad()
        result.steps = cfg.steps
        result.seconds = time.perf_counter() - started
        console.info("training finished", {"steps": cfg.steps, "seconds": round(result.seconds, 1)})
        return result
