# src/models/head.py
"""
检测头

热力图 → 掩码 top-k 选 query → 框级池化扩散掩码 → 下一阶段；
每个 query 在 (2r+1)² 窗口内做一次交叉注意力后回归成 3D 框。
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.ndimage import minimum_filter
from scipy.special import expit, logit

from src.models import ops
from src.models.lge import LgeParams, lge_forward
from src.models.params import ParamGroup, conv_kernel, full_param, he_normal, xavier_uniform, zeros_param
from src.models.tensor import Tensor, no_grad, tensor
from src.schemas.detection import Box3D, wrap_yaw
from src.schemas.scene import GridSpec
from src.utils import console
from src.utils.exceptions import CapacityError, DimensionError

HEATMAP_PRIOR_BIAS = -2.19  # sigmoid(−2.19) ≈ 0.1
REG_DIM = 8                  # δx, δy, z, log l, log w, log h, sin yaw, cos yaw
LOG_SIZE_CLIP = 5.0
DEFAULT_WINDOW_RADIUS = 3
DEFAULT_POOL_KERNEL = 3


class StageMode(str, Enum):
    PARALLEL = "parallel"
    CASCADED = "cascaded"


# ============ 热力图 ============

@dataclass
class HeadParams(ParamGroup):
    conv1: Tensor  # 3×3×C×C
    bias1: Tensor
    conv2: Tensor  # 1×1×C×c
    bias2: Tensor


def init_head_params(
    channels: int,
    num_classes: int,
    rng: np.random.Generator,
    prior_bias: float = HEATMAP_PRIOR_BIAS,
) -> HeadParams:
    return HeadParams(
        conv1=conv_kernel(rng, 3, channels, channels),
        bias1=zeros_param((channels,)),
        conv2=conv_kernel(rng, 1, channels, num_classes, gain=0.1),
        bias2=full_param((num_classes,), prior_bias),
    )


@dataclass
class Heatmap:
    """scores = sigmoid(logits)，H×W×c"""
    logits: Tensor
    scores: Tensor

    @property
    def num_classes(self) -> int:
        return self.scores.shape[-1]

    def numpy(self) -> np.ndarray:
        return self.scores.numpy()


def heatmap_head(f: Tensor, p: HeadParams) -> Heatmap:
    """3×3 conv → relu → 1×1 conv → sigmoid"""
    hidden = ops.relu(ops.add_bias(ops.conv2d(f, p.conv1, padding=1), p.bias1))
    logits = ops.add_bias(ops.conv2d(hidden, p.conv2), p.bias2)
    return Heatmap(logits=logits, scores=ops.sigmoid(logits))


# ============ 掩码与选择 ============

@dataclass
class StageMask:
    """H×W 的 0/1 掩码，1 表示仍可被选中"""
    bits: np.ndarray
    stage_index: int = 0

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise DimensionError(f"stage mask must be H×W, got {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("stage mask must be binary")
        self.bits = bits.astype(np.uint8)

    @classmethod
    def ones(cls, height: int, width: int) -> "StageMask":
        return cls(np.ones((height, width), dtype=np.uint8))

    @property
    def shape(self):
        return self.bits.shape

    @property
    def open_cells(self) -> int:
        return int(self.bits.sum())

    def is_within(self, earlier: "StageMask") -> bool:
        """单调性：本掩码的 1 必须是 earlier 的 1 的子集"""
        return bool(np.all(self.bits <= earlier.bits))


@dataclass
class Query:
    row: int
    col: int
    class_id: int
    score: float
    stage: int = 0
    feature: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def cell(self):
        return self.row, self.col

    def to_row(self) -> List:
        return [self.stage, self.row, self.col, self.class_id, self.score]


@dataclass
class TopKResult:
    queries: List[Query]
    mask: StageMask
    requested: int
    capped: bool = False


def _scores_of(h: Union[Heatmap, np.ndarray]) -> np.ndarray:
    return h.scores.data if isinstance(h, Heatmap) else np.asarray(h)


def masked_topk(h: Union[Heatmap, np.ndarray], m: StageMask, k: int, stage: Optional[int] = None) -> TopKResult:
    """
    在 mask==1 的格子中选 k 个最高分（每格只取得分最高的类别）

    排序键: (分数降序, row, col, class)。k 超出可选格子数时截断并置 capped。
    """
    scores = _scores_of(h)
    if scores.ndim != 3 or scores.shape[:2] != m.shape:
        raise DimensionError(f"heatmap {scores.shape} does not match mask {m.shape}")
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    stage = m.stage_index if stage is None else stage

    best_cls = scores.argmax(axis=-1)
    best = scores.max(axis=-1)
    rows, cols = np.nonzero(m.bits)
    cand_score = best[rows, cols]
    cand_cls = best_cls[rows, cols]
    order = np.lexsort((cand_cls, cols, rows, -cand_score))[:k]

    capped = k > len(rows)
    if capped:
        console.warn(f"top-k capped: asked {k}, only {len(rows)} open cells", {"stage": stage})

    bits = m.bits.copy()
    bits[rows[order], cols[order]] = 0
    queries = [
        Query(row=int(rows[i]), col=int(cols[i]), class_id=int(cand_cls[i]), score=float(cand_score[i]), stage=stage)
        for i in order
    ]
    return TopKResult(queries=queries, mask=StageMask(bits, m.stage_index + 1), requested=k, capped=capped)


def box_pool_mask(m: StageMask, kernel: int = DEFAULT_POOL_KERNEL) -> StageMask:
    """最小值池化（腐蚀）：0 周围 kernel×kernel 窗口全部置 0"""
    if kernel < 1 or kernel % 2 == 0:
        raise DimensionError(f"pool kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return StageMask(m.bits.copy(), m.stage_index)
    pooled = minimum_filter(m.bits, size=kernel, mode="constant", cval=1)
    return StageMask(pooled, m.stage_index)


def stage_targets(gt: np.ndarray, m: StageMask) -> np.ndarray:
    """gt × mask，已被前面阶段占用的格子不再提供正监督"""
    gt = np.asarray(gt)
    if gt.ndim != 3 or gt.shape[:2] != m.shape:
        raise DimensionError(f"target grid {gt.shape} does not match mask {m.shape}")
    return gt * m.bits[..., None].astype(gt.dtype)


# ============ query 解码 ============

@dataclass
class DecoderParams(ParamGroup):
    wq: Tensor     # C×C
    wk: Tensor
    wv: Tensor
    reg_w: Tensor  # C×8
    reg_b: Tensor
    cls_w: Tensor  # C×c
    cls_b: Tensor
    radius: int = DEFAULT_WINDOW_RADIUS


def init_decoder_params(
    channels: int,
    num_classes: int,
    rng: np.random.Generator,
    radius: int = DEFAULT_WINDOW_RADIUS,
) -> DecoderParams:
    c = channels
    return DecoderParams(
        wq=xavier_uniform(rng, (c, c), c, c),
        wk=xavier_uniform(rng, (c, c), c, c),
        wv=xavier_uniform(rng, (c, c), c, c),
        reg_w=he_normal(rng, (c, REG_DIM), c, gain=0.05),
        reg_b=zeros_param((REG_DIM,)),
        cls_w=he_normal(rng, (c, num_classes), c, gain=0.05),
        cls_b=zeros_param((num_classes,)),
        radius=radius,
    )


@dataclass
class QueryOutputs:
    """可微的解码输出（训练时用）"""
    reg: Tensor             # Q×8
    refined_logit: Tensor   # Q

    def refined_scores(self) -> np.ndarray:
        return expit(self.refined_logit.data)


def _check_cells(queries: Sequence[Query], height: int, width: int) -> np.ndarray:
    cells = np.array([[q.row, q.col] for q in queries], dtype=np.int64).reshape(-1, 2)
    if cells.size and (
        cells[:, 0].min() < 0 or cells[:, 0].max() >= height or cells[:, 1].min() < 0 or cells[:, 1].max() >= width
    ):
        raise DimensionError("query cell outside feature grid")
    return cells


def query_outputs(queries: Sequence[Query], f: Tensor, p: DecoderParams) -> Optional[QueryOutputs]:
    """窗口交叉注意力 + 回归 / 分类头；没有 query 时返回 None"""
    if not queries:
        return None
    h, w, c = f.shape
    cells = _check_cells(queries, h, w)
    nq, kk = len(cells), (2 * p.radius + 1) ** 2

    qfeat = ops.gather_rows(ops.reshape(f, (h * w, c)), cells[:, 0] * w + cells[:, 1])
    windows = ops.reshape(ops.gather_windows(f, cells, p.radius), (nq * kk, c))
    keys = ops.reshape(windows @ p.wk, (nq, kk, c))
    values = ops.reshape(windows @ p.wv, (nq, kk, c))
    qv = ops.reshape(qfeat @ p.wq, (nq, 1, c))
    scores = ops.batched_matmul(qv, ops.transpose(keys, (0, 2, 1))) * (1.0 / math.sqrt(c))
    context = ops.reshape(ops.batched_matmul(ops.softmax(scores, axis=-1), values), (nq, c))
    out = qfeat + context

    reg = ops.add_bias(out @ p.reg_w, p.reg_b)
    cls_all = ops.add_bias(out @ p.cls_w, p.cls_b)
    num_classes = cls_all.shape[1]
    onehot = tensor(np.eye(num_classes)[[q.class_id for q in queries]], dtype=f.dtype)
    cls_sel = ops.sum(cls_all * onehot, axis=1)
    prior = logit(np.clip([q.score for q in queries], 1e-6, 1.0 - 1e-6))
    return QueryOutputs(reg=reg, refined_logit=cls_sel + tensor(prior, dtype=f.dtype))


def boxes_from_outputs(
    queries: Sequence[Query],
    reg: np.ndarray,
    scores: np.ndarray,
    grid: GridSpec,
) -> List[Box3D]:
    """回归量 → Box3D；中心 = 原点 + (cell + 0.5 + 偏移)·cell_size"""
    x0, y0 = grid.origin
    cs = grid.cell_size
    boxes = []
    for q, r, s in zip(queries, np.asarray(reg, dtype=np.float64), np.asarray(scores, dtype=np.float64)):
        dx, dy, z, ll, lw, lh, sin_y, cos_y = r
        sizes = np.exp(np.clip([ll, lw, lh], -LOG_SIZE_CLIP, LOG_SIZE_CLIP))
        boxes.append(
            Box3D(
                center=(x0 + (q.col + 0.5 + dx) * cs, y0 + (q.row + 0.5 + dy) * cs, float(z)),
                size=tuple(float(v) for v in sizes),
                yaw=wrap_yaw(math.atan2(sin_y, cos_y)),
                class_id=q.class_id,
                score=float(np.clip(s, 0.0, 1.0)),
            )
        )
    return boxes


def decode_queries(queries: Sequence[Query], f: Tensor, grid: GridSpec, p: DecoderParams) -> List[Box3D]:
    """每个 query 解码为一个框（一一对应）"""
    if f.shape[:2] != tuple(grid.extents):
        raise DimensionError(f"feature {f.shape[:2]} does not match grid extents {grid.extents}")
    _check_cells(queries, grid.height, grid.width)
    with no_grad():
        out = query_outputs(queries, f, p)
    if out is None:
        return []
    return boxes_from_outputs(queries, out.reg.data, out.refined_scores(), grid)


def encode_box_target(box: Box3D, row: int, col: int, grid: GridSpec) -> np.ndarray:
    """boxes_from_outputs 的逆：GT 框相对于 (row, col) 的 8 维回归目标"""
    x0, y0 = grid.origin
    cs = grid.cell_size
    return np.array(
        [
            (box.center[0] - x0) / cs - col - 0.5,
            (box.center[1] - y0) / cs - row - 0.5,
            box.center[2],
            *np.log(box.size),
            math.sin(box.yaw),
            math.cos(box.yaw),
        ]
    )


def query_dump_rows(queries: Sequence[Query]) -> List[List]:
    return [q.to_row() for q in queries]


# ============ 多阶段 ============

@dataclass
class StageOutput:
    index: int
    feature: Tensor
    heatmap: Heatmap
    mask_before: StageMask
    queries: List[Query]
    capped: bool = False


@dataclass
class MultiStageResult:
    stages: List[StageOutput]
    final_mask: StageMask

    @property
    def queries(self) -> List[Query]:
        return [q for s in self.stages for q in s.queries]

    @property
    def capped(self) -> bool:
        return any(s.capped for s in self.stages)


def run_multistage(
    f0: Tensor,
    lge_bank: Sequence[LgeParams],
    head_bank: Sequence[HeadParams],
    k_stages: int,
    n_queries: int,
    mode=StageMode.PARALLEL,
    pool_kernel: int = DEFAULT_POOL_KERNEL,
) -> MultiStageResult:
    """
    K 个阶段依次选 N 个 query，掩码在阶段之间按顺序折叠

    parallel: 每个阶段对同一个 F0 做增强
    cascaded: 阶段 i 增强阶段 i−1 的输出
    """
    mode = StageMode(mode)
    if len(lge_bank) != k_stages or len(head_bank) != k_stages:
        raise DimensionError(f"need {k_stages} LGE/head params, got {len(lge_bank)}/{len(head_bank)}")
    h, w, _ = f0.shape
    if k_stages * n_queries > h * w:
        raise CapacityError(f"K·N = {k_stages}×{n_queries} exceeds {h}×{w} grid cells")

    mask = StageMask.ones(h, w)
    prev = f0
    stages: List[StageOutput] = []
    for i in range(k_stages):
        source = f0 if mode == StageMode.PARALLEL else prev
        feature = lge_forward(source, lge_bank[i])
        hm = heatmap_head(feature, head_bank[i])
        picked = masked_topk(hm, mask, n_queries, stage=i)
        for q in picked.queries:
            q.feature = feature.data[q.row, q.col].copy()
        stages.append(StageOutput(i, feature, hm, mask, picked.queries, picked.capped))
        mask = box_pool_mask(picked.mask, pool_kernel)
        prev = feature
    console.debug("multistage selection", {"mode": mode.value, "queries": sum(len(s.queries) for s in stages)})
    return MultiStageResult(stages=stages, final_mask=mask)
