# src/routers/detect.py

import numpy as np
from fastapi import APIRouter, HTTPException
from starlette.concurrency import run_in_threadpool

from src.models.detector import detect
from src.schemas.api import DetectRequest, DetectResponse
from src.services.config import settings
from src.services.model_registry import model_registry
from src.tools.scene_sim import PointCloud
from src.tools.voxelize import bev_statistics
from src.utils import console
from src.utils.exceptions import CheckpointError, WaveBevError

router = APIRouter(prefix=settings.API_PREFIX, tags=["Detection"])


def _run_detection(req: DetectRequest) -> DetectResponse:
    model = model_registry.get(req.checkpoint)
    points = np.asarray(req.points, dtype=np.float32).reshape(-1, 4)
    stats, voxel = bev_statistics(PointCloud(points), model.cfg.grid)
    boxes = detect(stats, model.params, model.cfg, n_queries=req.n_queries, max_detections=req.max_detections)
    return DetectResponse(
        checkpoint=model.path,
        num_points=len(points),
        points_in_grid=voxel.in_cells,
        boxes=boxes,
        count=len(boxes),
    )


@router.post("/detect", response_model=DetectResponse)
async def detect_boxes(req: DetectRequest):
    """点云 → 3D 框"""
    try:
        return await run_in_threadpool(_run_detection, req)
    except CheckpointError as e:
        raise HTTPException(404, str(e))
    except (WaveBevError, ValueError) as e:
        console.warn("detect request rejected", str(e))
        raise HTTPException(400, str(e))
