from contextlib import asynccontextmanager

from dotenv import load_dotenv
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

load_dotenv()  # 自动读取当前目录或父目录的 .env

from src.routers import detect, reports  # noqa: E402
from src.schemas.api import HealthResponse  # noqa: E402
from src.services.config import settings  # noqa: E402
from src.services.model_registry import model_registry  # noqa: E402
from src.utils import console  # noqa: E402
from src.utils.exceptions import CheckpointError  # noqa: E402


@asynccontextmanager
async def lifespan(app: FastAPI):
    """应用启动时预加载默认 checkpoint（失败只告警，/detect 会返回 404）"""
    console.section("🚀 wavebev API 启动中...")
    if settings.CHECKPOINT_PATH:
        try:
            model_registry.get()
        except CheckpointError as e:
            console.warn("default checkpoint not loaded", str(e))
    else:
        console.warn("CHECKPOINT_PATH not set; /detect needs an explicit checkpoint")
    console.info("服务启动完成", {"prefix": settings.API_PREFIX, "output_dir": settings.OUTPUT_DIR})
    yield


# ============ FastAPI 应用 ============
app = FastAPI(title="wavebev API", lifespan=lifespan)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# 注册路由
app.include_router(detect.router)
app.include_router(reports.router)


@app.get("/health", response_model=HealthResponse)
async def health():
    """健康检查"""
    return HealthResponse(
        status="ok",
        checkpoint=settings.CHECKPOINT_PATH,
        loaded=model_registry.is_loaded(),
    )
