# src/models/detector.py
"""
完整检测器：统计 → stem → 多阶段（LGE + 热力图 + top-k）→ query 解码
"""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from src.models import ops
from src.models.head import (
    DecoderParams,
    HeadParams,
    MultiStageResult,
    QueryOutputs,
    boxes_from_outputs,
    init_decoder_params,
    init_head_params,
    query_outputs,
    run_multistage,
)
from src.models.lge import LgeParams, init_lge_params
from src.models.params import ParamGroup
from src.models.tensor import Tensor, no_grad
from src.schemas.detection import Box3D
from src.schemas.train import TrainConfig
from src.tools.voxelize import StemParams, apply_stem, init_stem_params


@dataclass
class DetectorParams(ParamGroup):
    stem: StemParams
    lge_bank: List[LgeParams]
    heads: List[HeadParams]
    decoder: DecoderParams

    def stage_parameters(self, stage: int) -> List[Tensor]:
        return self.lge_bank[stage].parameters() + self.heads[stage].parameters()


def init_detector_params(cfg: TrainConfig, rng: Optional[np.random.Generator] = None) -> DetectorParams:
    """按配置初始化；同一个 seed 得到同一组参数"""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    c = cfg.channels
    return DetectorParams(
        stem=init_stem_params(c, rng),
        lge_bank=[
            init_lge_params(c, cfg.lge.variant, cfg.lge.iterations, rng, num_heads=cfg.lge.num_heads)
            for _ in range(cfg.k_stages)
        ],
        heads=[init_head_params(c, cfg.num_classes, rng) for _ in range(cfg.k_stages)],
        decoder=init_decoder_params(c, cfg.num_classes, rng, radius=cfg.window_radius),
    )


@dataclass
class DetectorOutput:
    f0: Tensor
    multistage: MultiStageResult
    query_out: Optional[QueryOutputs]

    @property
    def queries(self):
        return self.multistage.queries

    @property
    def heatmaps(self):
        return [s.heatmap for s in self.multistage.stages]


def detector_forward(
    stats: np.ndarray,
    params: DetectorParams,
    cfg: TrainConfig,
    n_queries: Optional[int] = None,
) -> DetectorOutput:
    """
    可微前向（在 Tape 内调用即可训练）

    每个 query 在自己阶段的增强特征上解码。
    """
    f0 = apply_stem(stats, params.stem)
    ms = run_multistage(
        f0,
        params.lge_bank,
        params.heads,
        cfg.k_stages,
        n_queries or cfg.n_queries,
        mode=cfg.mode,
        pool_kernel=cfg.pool_kernel,
    )
    outs = [query_outputs(s.queries, s.feature, params.decoder) for s in ms.stages]
    outs = [o for o in outs if o is not None]
    if not outs:
        return DetectorOutput(f0=f0, multistage=ms, query_out=None)
    if len(outs) == 1:
        merged = outs[0]
    else:
        merged = QueryOutputs(
            reg=ops.concat([o.reg for o in outs], axis=0),
            refined_logit=ops.concat([o.refined_logit for o in outs], axis=0),
        )
    return DetectorOutput(f0=f0, multistage=ms, query_out=merged)


def detect(
    stats: np.ndarray,
    params: DetectorParams,
    cfg: TrainConfig,
    n_queries: Optional[int] = None,
    max_detections: Optional[int] = None,
) -> List[Box3D]:
    """推理：按分数降序保留至多 max_detections 个框"""
    with no_grad():
        out = detector_forward(stats, params, cfg, n_queries=n_queries)
    if out.query_out is None:
        return []
    boxes = boxes_from_outputs(out.queries, out.query_out.reg.data, out.query_out.refined_scores(), cfg.grid)
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    cap = max_detections or cfg.max_detections
    return [boxes[i] for i in order[:cap]]
