# src/models/attention.py
"""
全局分支：下采样 → 展平 → 多头自注意力 → FFN → 还原形状

不加位置编码，所以注意力对 token 排列是等变的。
"""
from dataclasses import dataclass

import numpy as np

from src.models import ops
from src.models.params import ParamGroup, conv_kernel, full_param, xavier_uniform, zeros_param
from src.models.tensor import Tensor
from src.utils.exceptions import DimensionError

FFN_EXPANSION = 4


@dataclass
class AttentionParams(ParamGroup):
    """
    单层注意力块参数

    downsample_kernel 是 depthwise 3×3（3×3×1×C），stride 默认为 2；
    stride=1 用于全分辨率的配置。
    """
    num_heads: int
    head_dim: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    downsample_kernel: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    stride: int = 2

    def __post_init__(self):
        c = self.wq.shape[0]
        if self.num_heads * self.head_dim != c:
            raise DimensionError(f"num_heads × head_dim = {self.num_heads}×{self.head_dim} != C={c}")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (c, c):
                raise DimensionError(f"{name} must be {c}×{c}")
        if self.stride not in (1, 2):
            raise DimensionError(f"hybrid encode stride must be 1 or 2, got {self.stride}")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]


def init_attention_params(
    channels: int,
    rng: np.random.Generator,
    num_heads: int = 4,
    stride: int = 2,
) -> AttentionParams:
    if channels % num_heads:
        raise DimensionError(f"C={channels} not divisible by num_heads={num_heads}")
    c, hidden = channels, FFN_EXPANSION * channels
    return AttentionParams(
        num_heads=num_heads,
        head_dim=c // num_heads,
        wq=xavier_uniform(rng, (c, c), c, c),
        wk=xavier_uniform(rng, (c, c), c, c),
        wv=xavier_uniform(rng, (c, c), c, c),
        wo=xavier_uniform(rng, (c, c), c, c),
        ffn_w1=xavier_uniform(rng, (c, hidden), c, hidden),
        ffn_b1=zeros_param((hidden,)),
        ffn_w2=xavier_uniform(rng, (hidden, c), hidden, c),
        ffn_b2=zeros_param((c,)),
        downsample_kernel=conv_kernel(rng, 3, 1, c),
        ln_gamma=full_param((c,), 1.0),
        ln_beta=zeros_param((c,)),
        stride=stride,
    )


# ============ 注意力 ============

def _split_heads(x: Tensor, num_heads: int, head_dim: int) -> Tensor:
    """T×C → heads×T×d"""
    t = x.shape[0]
    return ops.transpose(ops.reshape(x, (t, num_heads, head_dim)), (1, 0, 2))


def attention_weights(x: Tensor, p: AttentionParams) -> Tensor:
    """每个头的注意力权重 heads×T×T，行和为 1"""
    if x.ndim != 2 or x.shape[1] != p.channels:
        raise DimensionError(f"attention expects T×{p.channels} tokens, got {x.shape}")
    q = _split_heads(x @ p.wq, p.num_heads, p.head_dim)
    k = _split_heads(x @ p.wk, p.num_heads, p.head_dim)
    scores = ops.batched_matmul(q, ops.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(p.head_dim))
    return ops.softmax(scores, axis=-1)


def multi_head_self_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """
    softmax(Q_h K_hᵀ / √d) V_h，各头拼接后经输出投影

    不含归一化与残差（由 hybrid_encode 负责）
    """
    weights = attention_weights(x, p)
    v = _split_heads(x @ p.wv, p.num_heads, p.head_dim)
    heads = ops.batched_matmul(weights, v)  # heads×T×d
    t = x.shape[0]
    merged = ops.reshape(ops.transpose(heads, (1, 0, 2)), (t, p.channels))
    return merged @ p.wo


def feed_forward(x: Tensor, p: AttentionParams) -> Tensor:
    """x + W2·relu(W1·x + b1) + b2"""
    hidden = ops.relu(ops.add_bias(x @ p.ffn_w1, p.ffn_b1))
    return x + ops.add_bias(hidden @ p.ffn_w2, p.ffn_b2)


def downsample(f0: Tensor, p: AttentionParams) -> Tensor:
    """depthwise 3×3，边缘复制填充（常数输入保持常数）"""
    return ops.conv2d(f0, p.downsample_kernel, stride=p.stride, padding=1, groups=p.channels, pad_mode="edge")


def attend_tokens(s1: Tensor, p: AttentionParams) -> Tensor:
    """已下采样特征 → tokens + MHSA(LN(tokens)) → FFN → 还原形状"""
    ho, wo, c = s1.shape
    tokens = ops.reshape(s1, (ho * wo, c))
    normed = ops.layer_norm(tokens, p.ln_gamma, p.ln_beta)
    attended = tokens + multi_head_self_attention(normed, p)
    return ops.reshape(feed_forward(attended, p), (ho, wo, c))


def hybrid_encode(f0: Tensor, p: AttentionParams) -> Tensor:
    """
    S1 = DWConv(F0)，再经 attend_tokens

    stride=2 时输出 H/2×W/2×C，与 wavelet_encode 的输出对齐
    """
    if f0.ndim != 3:
        raise DimensionError(f"hybrid_encode expects H×W×C, got {f0.shape}")
    h, w, c = f0.shape
    if c != p.channels:
        raise DimensionError(f"hybrid_encode: params built for C={p.channels}, input has C={c}")
    if p.stride == 2 and (h % 2 or w % 2):
        raise DimensionError(f"hybrid_encode needs even extents, got {h}×{w}")
    return attend_tokens(downsample(f0, p), p)
