# src/utils/console.py
"""
控制台输出

统一的 emoji 前缀状态行；debug 行只在 settings.DEBUG 时输出。
"""
import json
from typing import Any


def _format(msg: str, data: Any = None) -> str:
    if data is None:
        return msg
    try:
        if isinstance(data, (dict, list)):
            data_str = json.dumps(data, ensure_ascii=False, default=str)[:500]
        else:
            data_str = str(data)[:500]
    except (TypeError, ValueError):
        data_str = repr(data)[:500]
    return f"{msg}: {data_str}"


def info(msg: str, data: Any = None) -> None:
    print(f"✅ {_format(msg, data)}")


def start(msg: str, data: Any = None) -> None:
    print(f"🚀 {_format(msg, data)}")


def metric(msg: str, data: Any = None) -> None:
    print(f"📊 {_format(msg, data)}")


def warn(msg: str, data: Any = None) -> None:
    print(f"⚠️ {_format(msg, data)}")


def error(msg: str, data: Any = None) -> None:
    print(f"❌ {_format(msg, data)}")


def debug(msg: str, data: Any = None) -> None:
    """调试日志"""
    from src.services.config import settings

    if not settings.DEBUG:
        return
    print(f"[WAVEBEV DEBUG] {_format(msg, data)}")


def section(title: str, width: int = 50) -> None:
    print("\n" + "=" * width)
    print(title)
    print("=" * width)
