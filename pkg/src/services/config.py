from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()  # 自动读取当前目录或父目录的 .env


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    # 目录配置
    DATA_DIR: str = "data"
    OUTPUT_DIR: str = "outputs"
    CHECKPOINT_PATH: Optional[str] = None   # HTTP 接口默认加载的 checkpoint

    # 运行配置
    DEBUG: bool = False
    DEFAULT_SEED: int = 42

    # API 配置
    API_PREFIX: str = "/wavebev"

    @property
    def data_path(self) -> Path:
        return Path(self.DATA_DIR)

    @property
    def output_path(self) -> Path:
        return Path(self.OUTPUT_DIR)


settings = Settings()
