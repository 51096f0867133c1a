# src/routers/reports.py

import json
import re

from fastapi import APIRouter, HTTPException

from src.services.config import settings

router = APIRouter(prefix=f"{settings.API_PREFIX}/reports", tags=["Reports"])

_NAME = re.compile(r"^[A-Za-z0-9_.\-][A-Za-z0-9_.\-/]*$")


@router.get("/{name:path}")
async def get_report(name: str):
    """读取 OUTPUT_DIR 下的评估报告（name 不带 .json 也可以）"""
    if not _NAME.match(name) or ".." in name.split("/"):
        raise HTTPException(400, "Invalid report name")
    root = settings.output_path.resolve()
    path = settings.output_path / name
    if path.suffix != ".json":
        path = path.with_suffix(".json") if not path.is_dir() else path / "metrics.json"
    # 符号链接也不能逃出 OUTPUT_DIR
    if not path.resolve().is_relative_to(root):
        raise HTTPException(400, "Invalid report name")
    if not path.exists():
        raise HTTPException(404, "Report not found")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        raise HTTPException(400, "Report is not valid JSON")
