# src/utils/grad_check.py
"""
中心差分梯度检查
"""
from typing import Callable, Dict, Tuple, Union

import numpy as np

from src.models.tensor import Tape, Tensor, backward, no_grad
from src.utils.context import default_dtype


def numerical_gradient(f: Callable[[Tensor], Tensor], x0: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """(f(x+eps·e) − f(x−eps·e)) / (2·eps)，逐坐标"""
    numeric = np.zeros_like(x0)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy()
            xm = x0.copy()
            xp.flat[i] += eps
            xm.flat[i] -= eps
            numeric.flat[i] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * eps)
    return numeric


def grad_check(f: Callable[[Tensor], Tensor], x: Union[Tensor, np.ndarray], eps: float = 1e-5) -> float:
    """
    比较 tape 梯度与中心差分

    Args:
        f: 标量输出的可微函数
        x: 检查点
        eps: 差分步长

    Returns:
        逐坐标相对误差 |a − n| / max(|a|, |n|, 1e-8) 中的最大值
    """
    with default_dtype(np.float64):
        x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        with Tape():
            xt = Tensor(x0, requires_grad=True)
            y = f(xt)
        if y._tape is None:
            # f 与 x 无关时解析梯度为 0
            analytic = np.zeros_like(x0)
        else:
            backward(y)
            analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
        numeric = numerical_gradient(f, x0, eps)

    if x0.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ============ 内置检查集 ============

SUITE_TOLERANCE = 1e-6
COMPOSED_TOLERANCE = 1e-5


def _projected(fn: Callable[[Tensor], Tensor], shape, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """把任意形状的输出用固定随机权重投影成标量，避免梯度恒为 0 的退化检查"""
    from src.models import ops

    w = Tensor(rng.normal(size=shape))

    def f(x: Tensor) -> Tensor:
        return ops.sum(ops.mul(fn(x), w))

    return f


def gradient_suite(seed: int = 0) -> Dict[str, Tuple[float, float]]:
    """
    对核心算子逐一做梯度检查

    Returns:
        名称 → (最大相对误差, 容差)
    """
    from src.models import ops
    from src.models.attention import feed_forward, init_attention_params, multi_head_self_attention
    from src.models.lge import LgeVariant, init_lge_params, lge_forward
    from src.services.train_service import focal_loss

    rng = np.random.default_rng(seed)
    results: Dict[str, Tuple[float, float]] = {}
    with default_dtype(np.float64):
        b = Tensor(rng.normal(size=(4, 3)))
        kernel = Tensor(rng.normal(size=(3, 3, 2, 3)))
        attn = init_attention_params(8, rng, num_heads=2)
        lge = init_lge_params(8, LgeVariant.G, iterations=1, rng=rng)
        target = rng.uniform(0.0, 0.9, size=(4, 4, 2))
        target[1, 2, 0] = 1.0
        target[3, 0, 1] = 1.0

        cases = [
            ("matmul", lambda x: ops.matmul(x, b), (2, 4), (2, 3), SUITE_TOLERANCE),
            ("conv2d", lambda x: ops.conv2d(x, kernel, stride=1, padding=1), (5, 5, 2), (5, 5, 3), SUITE_TOLERANCE),
            ("softmax", lambda x: ops.softmax(x, axis=-1), (3, 5), (3, 5), SUITE_TOLERANCE),
            ("attention", lambda x: multi_head_self_attention(x, attn), (6, 8), (6, 8), SUITE_TOLERANCE),
            ("ffn", lambda x: feed_forward(x, attn), (6, 8), (6, 8), SUITE_TOLERANCE),
            ("lge_g", lambda x: lge_forward(x, lge), (4, 4, 8), (4, 4, 8), COMPOSED_TOLERANCE),
        ]
        for name, fn, in_shape, out_shape, tol in cases:
            x0 = rng.normal(size=in_shape)
            results[name] = (grad_check(_projected(fn, out_shape, rng), x0), tol)

        logits0 = rng.normal(scale=0.5, size=(4, 4, 2))
        results["focal_loss"] = (grad_check(lambda x: focal_loss(x, target), logits0), SUITE_TOLERANCE)
    return results
