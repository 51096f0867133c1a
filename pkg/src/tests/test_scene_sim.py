# src/tests/test_scene_sim.py

import math

import numpy as np
import pytest

from src.schemas.detection import Box3D
from src.schemas.scene import Difficulty, GridSpec, SceneSpec
from src.services.scene_store import SceneStore, scene_seed
from src.tests.conftest import make_tiny_config
from src.tools.scene_sim import (
    PointCloud,
    generate_scene,
    object_point_count,
    point_density,
    sample_object_points,
    visible_surface_area,
)
from src.models.detector import init_detector_params
from src.tools.voxelize import (
    NUM_STAT_CHANNELS,
    apply_stem,
    bev_statistics,
    gaussian_heatmap_targets,
    gaussian_sigma,
    voxelize_bev,
)
from src.utils.exceptions import SceneGenerationError

SMALL_GRID = GridSpec(origin=(-4.8, -4.8), cell_size=0.6, extents=(16, 16))


# ============ 场景生成 ============

def test_same_seed_same_scene():
    spec = SceneSpec(num_objects=4)
    a = generate_scene(spec, seed=11)
    b = generate_scene(spec, seed=11)
    np.testing.assert_array_equal(a.points.points, b.points.points)
    assert [x.to_row() for x in a.boxes] == [x.to_row() for x in b.boxes]


def test_different_seed_different_scene():
    spec = SceneSpec(num_objects=4)
    a = generate_scene(spec, seed=1)
    b = generate_scene(spec, seed=2)
    assert [x.to_row() for x in a.boxes] != [x.to_row() for x in b.boxes]


def test_boxes_inside_grid_and_not_overlapping():
    grid = GridSpec()
    scene = generate_scene(SceneSpec(num_objects=12), seed=5, grid=grid)
    assert len(scene.boxes) == 12
    for i, a in enumerate(scene.boxes):
        assert grid.contains_xy(a.x, a.y)
        assert -math.pi <= a.yaw < math.pi
        for b in scene.boxes[i + 1:]:
            gap = 0.5 * (math.hypot(*a.size[:2]) + math.hypot(*b.size[:2]))
            assert math.hypot(a.x - b.x, a.y - b.y) >= gap


def test_point_counts_are_deterministic_per_object():
    spec = SceneSpec(num_objects=6, clutter_rate=0)
    scene = generate_scene(spec, seed=3)
    expected = [object_point_count(b, d, spec) for b, d in zip(scene.boxes, scene.difficulties)]
    assert scene.object_point_counts == expected
    assert len(scene.points) == sum(expected)


def test_weak_fraction_extremes():
    easy = generate_scene(SceneSpec(num_objects=5, weak_fraction=0.0), seed=4)
    weak = generate_scene(SceneSpec(num_objects=5, weak_fraction=1.0), seed=4)
    assert set(easy.difficulties) == {Difficulty.EASY}
    assert set(weak.difficulties) == {Difficulty.WEAK}


def test_density_falls_off_with_distance():
    spec = SceneSpec()
    assert point_density("easy", 0.0, spec) == pytest.approx(spec.easy_density)
    assert point_density("easy", spec.density_falloff_m, spec) == pytest.approx(spec.easy_density / 2)
    assert point_density("weak", 5.0, spec) < point_density("easy", 5.0, spec)


def test_far_weak_objects_get_fewer_points():
    spec = SceneSpec()
    near = Box3D(center=(1.0, 0.0, 0.8), size=(4.2, 1.8, 1.6), yaw=0.0, class_id=0)
    far = Box3D(center=(18.0, 0.0, 0.8), size=(4.2, 1.8, 1.6), yaw=0.0, class_id=0)
    assert object_point_count(far, "weak", spec) < object_point_count(near, "easy", spec)
    assert object_point_count(far, "weak", spec) >= 1


def test_weak_far_object_sparser_than_easy_near_one():
    spec = SceneSpec()
    weak = Box3D(center=(15.0, 0.0, 0.88), size=(0.7, 0.7, 1.75), yaw=0.0, class_id=1)
    easy = Box3D(center=(5.0, 0.0, 0.88), size=(0.7, 0.7, 1.75), yaw=0.0, class_id=1)
    assert object_point_count(weak, Difficulty.WEAK, spec) < object_point_count(easy, Difficulty.EASY, spec)


def test_points_lie_on_the_box_surface():
    spec = SceneSpec(surface_noise_m=0.0)
    box = Box3D(center=(2.0, -3.0, 0.8), size=(4.2, 1.8, 1.6), yaw=0.5, class_id=0)
    pts = sample_object_points(box, "easy", np.random.default_rng(0), spec)
    assert pts.shape == (object_point_count(box, "easy", spec), 4)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = pts[:, 0] - box.x, pts[:, 1] - box.y
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    lz = pts[:, 2] - box.center[2]
    l, w, h = box.size
    assert np.all(np.abs(lx) <= l / 2 + 1e-9)
    assert np.all(np.abs(ly) <= w / 2 + 1e-9)
    assert np.all(np.abs(lz) <= h / 2 + 1e-9)
    on_face = np.isclose(np.abs(lx), l / 2) | np.isclose(np.abs(ly), w / 2) | np.isclose(lz, h / 2)
    assert on_face.all()
    assert visible_surface_area(box.size) == pytest.approx(l * w + 2 * (l + w) * h)


def test_unplaceable_object_raises():
    spec = SceneSpec(num_objects=1, class_mix={"vehicle": 1.0}, max_retries=5)
    with pytest.raises(SceneGenerationError):
        generate_scene(spec, seed=0, grid=GridSpec(extents=(2, 2)))


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, 0.0, np.nan, 0.5]]))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, 0.0, 0.0, 1.5]]))
    assert len(PointCloud.empty()) == 0


def test_scene_spec_rejects_unknown_class_and_denser_weak():
    with pytest.raises(ValueError):
        SceneSpec(class_mix={"bicycle": 1.0})
    with pytest.raises(ValueError):
        SceneSpec(easy_density=2.0, weak_density=3.0)


# ============ BEV 统计 ============

def test_bev_statistics_values():
    pc = PointCloud(
        np.array(
            [
                [-4.5, -4.5, 0.0, 0.2],
                [-4.5, -4.5, 1.0, 0.6],
                [0.1, 0.1, 2.0, 1.0],
            ]
        )
    )
    stats, voxel = bev_statistics(pc, SMALL_GRID)
    assert stats.shape == (16, 16, NUM_STAT_CHANNELS)
    assert voxel.in_cells == 3 and voxel.dropped == 0
    cell = stats[0, 0]
    assert cell[0] == pytest.approx(math.log(3.0))
    assert cell[1] == pytest.approx(0.5)
    assert cell[2] == pytest.approx(1.0)
    assert cell[3] == pytest.approx(0.4)
    assert cell[4] == 1.0
    row, col = SMALL_GRID.cell_of(0.1, 0.1)
    assert stats[row, col, 2] == pytest.approx(2.0)
    assert stats[..., 4].sum() == 2.0


def test_mean_and_max_height_in_one_cell():
    pc = PointCloud(np.array([[0.1, 0.1, 1.0, 0.5], [0.2, 0.2, 3.0, 0.5]]))
    stats, _ = bev_statistics(pc, SMALL_GRID)
    row, col = SMALL_GRID.cell_of(0.1, 0.1)
    assert stats[row, col, 1] == pytest.approx(2.0)
    assert stats[row, col, 2] == pytest.approx(3.0)


def test_out_of_range_points_are_dropped():
    pc = PointCloud(
        np.array(
            [
                [5.0, 0.0, 0.0, 0.5],    # x 越界（右端开区间）
                [0.0, -5.0, 0.0, 0.5],   # y 越界
                [0.0, 0.0, 3.5, 0.5],    # z 越界
                [0.0, 0.0, 0.0, 0.5],
            ]
        )
    )
    stats, voxel = bev_statistics(pc, SMALL_GRID)
    assert voxel.dropped == 3 and voxel.in_cells == 1 and voxel.total == 4
    assert stats[..., 4].sum() == 1.0


def test_empty_cloud_gives_zero_stats():
    stats, voxel = bev_statistics(PointCloud.empty(), SMALL_GRID)
    assert not stats.any()
    assert voxel.total == 0


def test_voxelize_bev_runs_stem_on_statistics():
    cfg = make_tiny_config()
    scene = generate_scene(cfg.scene, seed=2, grid=cfg.grid)
    stem = init_detector_params(cfg).stem
    f0 = voxelize_bev(scene.points, cfg.grid, stem)
    assert f0.shape == (16, 16, cfg.channels)
    stats, voxel = bev_statistics(scene.points, cfg.grid)
    np.testing.assert_array_equal(f0.data, apply_stem(stats, stem).data)
    assert voxel.in_cells + voxel.dropped == len(scene.points)


def test_generated_scene_keeps_points_in_grid():
    cfg = make_tiny_config()
    scene = generate_scene(cfg.scene, seed=1, grid=cfg.grid)
    _, voxel = bev_statistics(scene.points, cfg.grid)
    assert voxel.in_cells > 0
    assert voxel.dropped <= len(scene.points) // 10


# ============ 热力图目标 ============

def test_gaussian_target_peaks_at_center_cell():
    box = Box3D(center=(0.1, 0.1, 0.5), size=(2.0, 0.5, 1.0), yaw=0.0, class_id=2)
    target = gaussian_heatmap_targets([box], SMALL_GRID, 3)
    row, col = SMALL_GRID.cell_of(0.1, 0.1)
    assert target[row, col, 2] == 1.0
    assert target.max() == 1.0
    assert not target[..., :2].any()
    assert target[row, col + 1, 2] == pytest.approx(math.exp(-1.0 / (2.0 * gaussian_sigma(box, SMALL_GRID) ** 2)))


def test_doubling_cell_size_halves_center_cell_index():
    fine = GridSpec()
    coarse = GridSpec(origin=fine.origin, cell_size=2 * fine.cell_size, extents=fine.extents)
    scene = generate_scene(SceneSpec(num_objects=10), seed=21, grid=fine)
    coarse_targets = gaussian_heatmap_targets(scene.boxes, coarse, 3)
    for box in scene.boxes:
        r1, c1 = fine.cell_of(box.x, box.y)
        r2, c2 = coarse.cell_of(box.x, box.y)
        assert abs(r2 - r1 / 2) <= 1 and abs(c2 - c1 / 2) <= 1
        assert coarse_targets[r2, c2, box.class_id] == 1.0


def test_overlapping_targets_take_max():
    a = Box3D(center=(0.1, 0.1, 0.5), size=(0.7, 0.7, 1.75), yaw=0.0, class_id=1)
    b = Box3D(center=(0.7, 0.1, 0.5), size=(0.7, 0.7, 1.75), yaw=0.0, class_id=1)
    target = gaussian_heatmap_targets([a, b], SMALL_GRID, 3)
    for box in (a, b):
        row, col = SMALL_GRID.cell_of(box.x, box.y)
        assert target[row, col, 1] == 1.0
    assert target.max() == 1.0


def test_boxes_outside_grid_are_ignored():
    box = Box3D(center=(40.0, 0.0, 0.5), size=(0.7, 0.7, 1.75), yaw=0.0, class_id=1)
    assert not gaussian_heatmap_targets([box], SMALL_GRID, 3).any()


# ============ 场景文件 ============

def test_scene_file_round_trip(tmp_path):
    scene = generate_scene(SceneSpec(num_objects=3), seed=9)
    path = SceneStore.save_scene(scene, GridSpec(), tmp_path / "one.bin")
    loaded, grid = SceneStore.load_scene(path)
    assert grid == GridSpec()
    np.testing.assert_array_equal(loaded.points.points, scene.points.points)
    assert [b.to_row() for b in loaded.boxes] == [b.to_row() for b in scene.boxes]
    assert loaded.difficulties == scene.difficulties
    assert loaded.object_point_counts == scene.object_point_counts
    assert loaded.seed == 9


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a scene at all")
    with pytest.raises(ValueError):
        SceneStore.load_scene(path)


def test_gen_data_writes_manifest_and_splits(tmp_path):
    cfg = make_tiny_config()
    SceneStore.gen_data(cfg, tmp_path)
    manifest = SceneStore.read_manifest(tmp_path)
    assert len(manifest["splits"]["train"]) == cfg.train_scenes
    assert len(manifest["splits"]["eval"]) == cfg.eval_scenes
    for name in manifest["splits"]["train"] + manifest["splits"]["eval"]:
        assert (tmp_path / name).exists()

    from_files = SceneStore.dataset_for(cfg, "eval", tmp_path)
    in_memory = SceneStore.dataset_for(cfg, "eval")
    assert [s.name for s in from_files] == [s.name for s in in_memory]
    for a, b in zip(from_files, in_memory):
        np.testing.assert_array_equal(a.stats, b.stats)
        np.testing.assert_array_equal(a.targets, b.targets)


def test_split_seeds_do_not_overlap():
    train = {scene_seed(42, "train", i) for i in range(500)}
    eval_ = {scene_seed(42, "eval", i) for i in range(100)}
    assert not train & eval_


def test_read_manifest_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        SceneStore.read_manifest(tmp_path)
