# src/tools/scene_sim.py
"""
合成 LiDAR 场景

物体点采在框表面（不含底面），点密度随距离衰减：
    density(d) = base / (1 + (d / falloff)²)
easy 与 weak 只差 base。背景杂点按泊松期望撒在整个网格。
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from src.schemas.detection import Box3D
from src.schemas.scene import CLASS_NAMES, CLASS_SIZES, Difficulty, GridSpec, SceneSpec
from src.utils import console
from src.utils.exceptions import SceneGenerationError


@dataclass
class PointCloud:
    """N×4: x, y, z, intensity"""
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        if pts.size and (pts[:, 3].min() < 0 or pts[:, 3].max() > 1):
            raise ValueError("intensity must lie in [0, 1]")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 4), dtype=np.float32))


@dataclass
class Scene:
    points: PointCloud
    boxes: List[Box3D]
    difficulties: List[Difficulty] = field(default_factory=list)
    object_point_counts: List[int] = field(default_factory=list)
    seed: int = 0


# ============ 密度与表面采样 ============

def point_density(difficulty, distance: float, spec: Optional[SceneSpec] = None) -> float:
    """每平方米点数"""
    spec = spec or SceneSpec()
    base = spec.easy_density if Difficulty(difficulty) == Difficulty.EASY else spec.weak_density
    return base / (1.0 + (distance / spec.density_falloff_m) ** 2)


def visible_surface_area(size: Tuple[float, float, float]) -> float:
    """顶面 + 四个侧面"""
    l, w, h = size
    return l * w + 2.0 * (l + w) * h


def object_point_count(box: Box3D, difficulty, spec: Optional[SceneSpec] = None) -> int:
    """确定性的点数: clip(round(density × area), 1, cap)"""
    spec = spec or SceneSpec()
    distance = math.hypot(box.center[0], box.center[1])
    n = int(round(point_density(difficulty, distance, spec) * visible_surface_area(box.size)))
    return int(np.clip(n, 1, spec.max_points_per_object))


def sample_object_points(
    box: Box3D,
    difficulty,
    rng: np.random.Generator,
    spec: Optional[SceneSpec] = None,
) -> np.ndarray:
    """在框表面按面积比例采样，返回 n×4"""
    spec = spec or SceneSpec()
    n = object_point_count(box, difficulty, spec)
    l, w, h = box.size
    # 面: 顶, +x, −x, +y, −y
    areas = np.array([l * w, w * h, w * h, l * h, l * h])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.zeros((n, 3))
    top, px, nx, py = face == 0, face == 1, face == 2, face == 3
    ny = face == 4
    local[top] = np.stack([u[top] * l, v[top] * w, np.full(top.sum(), h / 2)], axis=1)
    for sel, sign in ((px, 0.5), (nx, -0.5)):
        local[sel] = np.stack([np.full(sel.sum(), sign * l), u[sel] * w, v[sel] * h], axis=1)
    for sel, sign in ((py, 0.5), (ny, -0.5)):
        local[sel] = np.stack([u[sel] * l, np.full(sel.sum(), sign * w), v[sel] * h], axis=1)
    local += rng.normal(0.0, spec.surface_noise_m, size=local.shape)

    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xs = box.center[0] + c * local[:, 0] - s * local[:, 1]
    ys = box.center[1] + s * local[:, 0] + c * local[:, 1]
    zs = box.center[2] + local[:, 2]
    intensity = np.clip(rng.normal(0.7, 0.15, size=n), 0.0, 1.0)
    return np.stack([xs, ys, zs, intensity], axis=1)


def _footprint_half_extent(size, yaw: float) -> Tuple[float, float]:
    l, w, _ = size
    c, s = abs(math.cos(yaw)), abs(math.sin(yaw))
    return 0.5 * (l * c + w * s), 0.5 * (l * s + w * c)


def _place_box(
    class_id: int,
    grid: GridSpec,
    placed: List[Box3D],
    rng: np.random.Generator,
    max_retries: int,
) -> Box3D:
    size = CLASS_SIZES[CLASS_NAMES[class_id]]
    radius = 0.5 * math.hypot(size[0], size[1])
    for _ in range(max_retries):
        yaw = float(rng.uniform(-math.pi, math.pi))
        hx, hy = _footprint_half_extent(size, yaw)
        x_lo, x_hi = grid.origin[0] + hx, grid.x_max - hx
        y_lo, y_hi = grid.origin[1] + hy, grid.y_max - hy
        if x_lo >= x_hi or y_lo >= y_hi:
            break
        x = float(rng.uniform(x_lo, x_hi))
        y = float(rng.uniform(y_lo, y_hi))
        clear = all(
            math.hypot(x - b.center[0], y - b.center[1]) >= radius + 0.5 * math.hypot(b.size[0], b.size[1])
            for b in placed
        )
        if clear:
            return Box3D(center=(x, y, size[2] / 2), size=size, yaw=yaw if yaw < math.pi else -math.pi, class_id=class_id)
    raise SceneGenerationError(f"could not place a {CLASS_NAMES[class_id]} after {max_retries} tries")


def sample_clutter(grid: GridSpec, rate: float, rng: np.random.Generator) -> np.ndarray:
    n = int(rng.poisson(rate)) if rate > 0 else 0
    xs = rng.uniform(grid.origin[0], grid.x_max, size=n)
    ys = rng.uniform(grid.origin[1], grid.y_max, size=n)
    zs = rng.uniform(grid.z_range[0], grid.z_range[1], size=n)
    intensity = rng.uniform(0.0, 0.5, size=n)
    return np.stack([xs, ys, zs, intensity], axis=1)


# ============ 场景 ============

def generate_scene(spec: SceneSpec, seed: Optional[int] = None, grid: Optional[GridSpec] = None) -> Scene:
    """
    生成一个场景

    同一个 (spec, seed, grid) 总是得到逐位相同的点云与框。

    Raises:
        SceneGenerationError: 有物体在 max_retries 次尝试后仍放不下
    """
    seed = spec.seed if seed is None else seed
    grid = grid or GridSpec()
    rng = np.random.default_rng(seed)
    probs = spec.class_probabilities()

    boxes: List[Box3D] = []
    difficulties: List[Difficulty] = []
    counts: List[int] = []
    chunks = []
    for _ in range(spec.num_objects):
        class_id = int(rng.choice(len(CLASS_NAMES), p=probs))
        box = _place_box(class_id, grid, boxes, rng, spec.max_retries)
        difficulty = Difficulty.WEAK if rng.uniform() < spec.weak_fraction else Difficulty.EASY
        pts = sample_object_points(box, difficulty, rng, spec)
        boxes.append(box)
        difficulties.append(difficulty)
        counts.append(len(pts))
        chunks.append(pts)

    chunks.append(sample_clutter(grid, spec.clutter_rate, rng))
    points = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 4))
    console.debug("scene generated", {"seed": seed, "objects": len(boxes), "points": len(points)})
    return Scene(
        points=PointCloud(points),
        boxes=boxes,
        difficulties=difficulties,
        object_point_counts=counts,
        seed=seed,
    )
