# src/utils/exceptions.py
from typing import Optional


class WaveBevError(Exception):
    """所有 wavebev 异常的基类"""


class DimensionError(WaveBevError, ValueError):
    """形状/维度不满足算子约定"""


class NonFiniteError(WaveBevError, FloatingPointError):
    """算子输出出现 NaN / Inf"""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(f"non-finite values produced by '{op}' {message}".strip())


class TapeError(WaveBevError, RuntimeError):
    """backward 的根节点非法（非标量或未连接到 tape）"""


class SceneGenerationError(WaveBevError, RuntimeError):
    """有限次重试后仍无法放置物体"""


class CapacityError(WaveBevError, ValueError):
    """K·N 超过可被 mask 的格子数"""


class CheckpointError(WaveBevError, RuntimeError):
    """checkpoint 读写失败"""


class TrainingDivergedError(WaveBevError, FloatingPointError):
    """训练出现 NaN loss，附带诊断文件路径"""

    def __init__(self, step: int, dump_path: Optional[str] = None, reason: str = ""):
        self.step = step
        self.dump_path = dump_path
        msg = f"training diverged at step {step}"
        if reason:
            msg += f": {reason}"
        if dump_path:
            msg += f" (diagnostic dump: {dump_path})"
        super().__init__(msg)
