# src/utils/context.py
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Iterator, Optional

import numpy as np

# 上下文变量 - 当前记录梯度的 Tape 与默认浮点精度
_active_tape_var: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)  # noqa: F821
_default_dtype_var: ContextVar[type] = ContextVar("default_dtype", default=np.float32)


def set_active_tape(tape) -> object:
    """设置当前上下文的 tape，返回用于恢复的 token"""
    return _active_tape_var.set(tape)


def get_active_tape():
    """获取当前上下文的 tape（没有则为 None）"""
    return _active_tape_var.get()


def reset_active_tape(token) -> None:
    _active_tape_var.reset(token)


def get_default_dtype() -> type:
    """获取当前默认精度（float32 / float64）"""
    return _default_dtype_var.get()


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """
    临时切换默认精度

    梯度检查用 float64，训练用 float32。
    """
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype: {dtype}")
    token = _default_dtype_var.set(dtype)
    try:
        yield
    finally:
        _default_dtype_var.reset(token)
