# src/tools/voxelize.py
"""
点云 → BEV

手工柱状统计（5 通道）+ 两层 3×3 卷积 stem，
以及高斯中心热力图目标。
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from src.models import ops
from src.models.params import ParamGroup, conv_kernel, zeros_param
from src.models.tensor import Tensor, tensor
from src.schemas.detection import Box3D
from src.schemas.scene import GridSpec
from src.tools.scene_sim import PointCloud

STAT_CHANNELS = ("log_count", "mean_z", "max_z", "mean_intensity", "occupancy")
NUM_STAT_CHANNELS = len(STAT_CHANNELS)


@dataclass
class VoxelStats:
    """落入网格 / 被丢弃的点数"""
    in_cells: int
    dropped: int

    @property
    def total(self) -> int:
        return self.in_cells + self.dropped


def cell_of(x: float, y: float, grid: GridSpec) -> Optional[Tuple[int, int]]:
    return grid.cell_of(x, y)


def bev_statistics(pc: PointCloud, grid: GridSpec) -> Tuple[np.ndarray, VoxelStats]:
    """
    每格统计: log(1+count), mean z, max z, mean intensity, occupancy

    x 超出 [x0, x0+W·cs)、y 超出 [y0, y0+H·cs) 或 z 超出 z_range 的点丢弃。
    """
    h, w = grid.extents
    pts = pc.points.astype(np.float64)
    stats = np.zeros((h, w, NUM_STAT_CHANNELS), dtype=np.float32)
    if len(pts) == 0:
        return stats, VoxelStats(0, 0)

    cols = np.floor((pts[:, 0] - grid.origin[0]) / grid.cell_size).astype(np.int64)
    rows = np.floor((pts[:, 1] - grid.origin[1]) / grid.cell_size).astype(np.int64)
    z = pts[:, 2]
    keep = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w) & (z >= grid.z_range[0]) & (z <= grid.z_range[1])
    dropped = int((~keep).sum())
    rows, cols, z, inten = rows[keep], cols[keep], z[keep], pts[keep, 3]
    flat = rows * w + cols

    count = np.bincount(flat, minlength=h * w).astype(np.float64)
    sum_z = np.bincount(flat, weights=z, minlength=h * w)
    sum_i = np.bincount(flat, weights=inten, minlength=h * w)
    max_z = np.full(h * w, -np.inf)
    np.maximum.at(max_z, flat, z)

    occupied = count > 0
    safe = np.where(occupied, count, 1.0)
    channels = np.stack(
        [
            np.log1p(count),
            np.where(occupied, sum_z / safe, 0.0),
            np.where(occupied, max_z, 0.0),
            np.where(occupied, sum_i / safe, 0.0),
            occupied.astype(np.float64),
        ],
        axis=1,
    )
    stats[:] = channels.reshape(h, w, NUM_STAT_CHANNELS)
    return stats, VoxelStats(in_cells=int(keep.sum()), dropped=dropped)


# ============ 卷积 stem ============

@dataclass
class StemParams(ParamGroup):
    conv1: Tensor  # 3×3×5×C
    bias1: Tensor
    conv2: Tensor  # 3×3×C×C
    bias2: Tensor


def init_stem_params(channels: int, rng: np.random.Generator) -> StemParams:
    return StemParams(
        conv1=conv_kernel(rng, 3, NUM_STAT_CHANNELS, channels),
        bias1=zeros_param((channels,)),
        conv2=conv_kernel(rng, 3, channels, channels, gain=0.7),
        bias2=zeros_param((channels,)),
    )


def apply_stem(stats: np.ndarray, p: StemParams) -> Tensor:
    """H×W×5 统计 → H×W×C 的 F0"""
    x = tensor(stats)
    hidden = ops.relu(ops.add_bias(ops.conv2d(x, p.conv1, padding=1), p.bias1))
    return ops.add_bias(ops.conv2d(hidden, p.conv2, padding=1), p.bias2)


def voxelize_bev(pc: PointCloud, grid: GridSpec, p: StemParams) -> Tensor:
    stats, _ = bev_statistics(pc, grid)
    return apply_stem(stats, p)


# ============ 高斯目标 ============

def gaussian_sigma(box: Box3D, grid: GridSpec) -> float:
    """以格为单位: max(1, min(l, w) / (3·cell_size))"""
    return max(1.0, min(box.size[0], box.size[1]) / (3.0 * grid.cell_size))


def gaussian_heatmap_targets(boxes: Sequence[Box3D], grid: GridSpec, num_classes: int) -> np.ndarray:
    """
    每个框在自己的类别通道上以中心格为峰撒高斯，重叠取 max；中心格恰为 1
    """
    h, w = grid.extents
    target = np.zeros((h, w, num_classes), dtype=np.float32)
    rr, cc = np.mgrid[0:h, 0:w]
    for box in boxes:
        cell = grid.cell_of(box.center[0], box.center[1])
        if cell is None or not 0 <= box.class_id < num_classes:
            continue
        r0, c0 = cell
        sigma = gaussian_sigma(box, grid)
        reach = int(math.ceil(3 * sigma))
        r_lo, r_hi = max(0, r0 - reach), min(h, r0 + reach + 1)
        c_lo, c_hi = max(0, c0 - reach), min(w, c0 + reach + 1)
        d2 = (rr[r_lo:r_hi, c_lo:c_hi] - r0) ** 2 + (cc[r_lo:r_hi, c_lo:c_hi] - c0) ** 2
        blob = np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)
        view = target[r_lo:r_hi, c_lo:c_hi, box.class_id]
        np.maximum(view, blob, out=view)
    return target
