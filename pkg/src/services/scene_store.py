# src/services/scene_store.py
"""
场景文件与数据划分

单个场景文件:
    8 字节 magic | uint32 头长度 | 头 JSON（grid, seed, 计数）|
    float32 点 (N×4) | float64 框 (M×9)
全部小端。manifest.json 记录各划分的文件列表。
"""
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from src.schemas.detection import Box3D
from src.schemas.scene import Difficulty, GridSpec
from src.schemas.train import TrainConfig
from src.tools.scene_sim import PointCloud, Scene, generate_scene
from src.tools.voxelize import VoxelStats, bev_statistics, gaussian_heatmap_targets
from src.utils import console

MAGIC = b"WBEVSCN1"
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "eval")

# 划分之间的 seed 间隔，保证 train / eval 场景互不重叠
_SPLIT_STRIDE = 1_000_003
_SPLIT_OFFSET = {"train": 0, "eval": 500_000}


@dataclass
class SceneSample:
    """训练 / 评估用的一个样本"""
    name: str
    scene: Scene
    stats: np.ndarray     # H×W×5
    targets: np.ndarray   # H×W×c
    voxel: VoxelStats


def scene_seed(base_seed: int, split: str, index: int) -> int:
    return base_seed * _SPLIT_STRIDE + _SPLIT_OFFSET[split] + index


class SceneStore:
    """场景读写 + 数据集构建（无状态，静态方法）"""

    # ==================== 单个场景 ====================

    @staticmethod
    def save_scene(scene: Scene, grid: GridSpec, path: Union[str, Path]) -> Path:
        path = Path(path)
        header = {
            "grid": grid.model_dump(mode="json"),
            "seed": scene.seed,
            "num_points": len(scene.points),
            "num_boxes": len(scene.boxes),
            "difficulties": [d.value for d in scene.difficulties],
            "object_point_counts": list(scene.object_point_counts),
        }
        head = json.dumps(header, ensure_ascii=False).encode("utf-8")
        points = scene.points.points.astype("<f4")
        boxes = np.array([b.to_row() for b in scene.boxes], dtype="<f8").reshape(-1, 9)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(MAGIC + struct.pack("<I", len(head)) + head + points.tobytes() + boxes.tobytes())
        return path

    @staticmethod
    def load_scene(path: Union[str, Path]) -> Tuple[Scene, GridSpec]:
        buf = Path(path).read_bytes()
        if buf[: len(MAGIC)] != MAGIC:
            raise ValueError(f"{path}: not a scene file")
        offset = len(MAGIC)
        (head_len,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        header = json.loads(buf[offset: offset + head_len].decode("utf-8"))
        offset += head_len
        n_pts, n_boxes = header["num_points"], header["num_boxes"]
        points = np.frombuffer(buf, dtype="<f4", count=n_pts * 4, offset=offset).reshape(n_pts, 4)
        offset += n_pts * 16
        rows = np.frombuffer(buf, dtype="<f8", count=n_boxes * 9, offset=offset).reshape(n_boxes, 9)
        scene = Scene(
            points=PointCloud(points),
            boxes=[Box3D.from_row(r) for r in rows],
            difficulties=[Difficulty(d) for d in header.get("difficulties", [])],
            object_point_counts=header.get("object_point_counts", []),
            seed=header["seed"],
        )
        return scene, GridSpec.model_validate(header["grid"])

    # ==================== manifest ====================

    @staticmethod
    def write_manifest(root: Union[str, Path], splits: Dict[str, List[str]], meta: Optional[Dict] = None) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        path = root / MANIFEST_NAME
        path.write_text(json.dumps({"splits": splits, "meta": meta or {}}, indent=2, ensure_ascii=False), encoding="utf-8")
        return path

    @staticmethod
    def read_manifest(root: Union[str, Path]) -> Dict:
        path = Path(root) / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"no manifest at {path}")
        return json.loads(path.read_text(encoding="utf-8"))

    # ==================== 划分 ====================

    @staticmethod
    def generate_split(cfg: TrainConfig, split: str, count: Optional[int] = None) -> List[Scene]:
        if split not in SPLITS:
            raise ValueError(f"unknown split '{split}'")
        count = count if count is not None else (cfg.train_scenes if split == "train" else cfg.eval_scenes)
        return [generate_scene(cfg.scene, scene_seed(cfg.scene.seed, split, i), cfg.grid) for i in range(count)]

    @staticmethod
    def gen_data(cfg: TrainConfig, out_dir: Union[str, Path]) -> Path:
        """生成 train / eval 场景文件和 manifest"""
        out_dir = Path(out_dir)
        splits: Dict[str, List[str]] = {}
        for split in SPLITS:
            names = []
            for i, scene in enumerate(SceneStore.generate_split(cfg, split)):
                name = f"{split}/scene_{i:05d}.bin"
                SceneStore.save_scene(scene, cfg.grid, out_dir / name)
                names.append(name)
            splits[split] = names
            console.info(f"{split} split written", {"scenes": len(names), "dir": str(out_dir)})
        meta = {"scene": cfg.scene.model_dump(mode="json"), "grid": cfg.grid.model_dump(mode="json")}
        return SceneStore.write_manifest(out_dir, splits, meta)

    @staticmethod
    def load_split(root: Union[str, Path], split: str) -> Tuple[List[Scene], Optional[GridSpec]]:
        manifest = SceneStore.read_manifest(root)
        scenes, grid = [], None
        for name in manifest["splits"].get(split, []):
            scene, grid = SceneStore.load_scene(Path(root) / name)
            scenes.append(scene)
        return scenes, grid

    # ==================== 样本 ====================

    @staticmethod
    def build_dataset(scenes: List[Scene], grid: GridSpec, num_classes: int, prefix: str = "scene") -> List[SceneSample]:
        samples = []
        for i, scene in enumerate(scenes):
            stats, voxel = bev_statistics(scene.points, grid)
            targets = gaussian_heatmap_targets(scene.boxes, grid, num_classes)
            samples.append(SceneSample(f"{prefix}_{i:05d}", scene, stats, targets, voxel))
        return samples

    @staticmethod
    def dataset_for(cfg: TrainConfig, split: str, data_dir: Optional[Union[str, Path]] = None) -> List[SceneSample]:
        """有 manifest 就读文件，否则按配置现场生成"""
        if data_dir and (Path(data_dir) / MANIFEST_NAME).exists():
            scenes, grid = SceneStore.load_split(data_dir, split)
            grid = grid or cfg.grid
            if grid != cfg.grid:
                console.warn("scene files were generated on a different grid than the config", {"files": grid.model_dump(), "config": cfg.grid.model_dump()})
        else:
            scenes, grid = SceneStore.generate_split(cfg, split), cfg.grid
        return SceneStore.build_dataset(scenes, grid, cfg.num_classes, prefix=split)
