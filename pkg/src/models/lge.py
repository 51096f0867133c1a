# src/models/lge.py
"""
局部-全局增强块（小波分支 + 注意力分支）及其接线变体

    A0  恒等（不做增强，基线）
    A   小波编码 → 小波解码（注意力支路以零代替）
    B   注意力编码 → 最近邻上采样 + 1×1 融合（解码桩）
    C   注意力编码 + 小波解码，F2 由 S1 的 1×1 投影给出
    D   注意力编码 → 上采样 → 小波编码 → 小波解码（串行）
    E   小波编码 → 注意力编码 → 上采样 → 小波解码（串行，已知不收敛）
    F   小波编码 → 小波解码 → 全分辨率注意力（stride 1）
    G   小波编码 ‖ 注意力编码，拼接后小波解码（默认）
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.models import ops
from src.models.attention import (
    AttentionParams,
    attend_tokens,
    downsample,
    hybrid_encode,
    init_attention_params,
)
from src.models.params import ParamGroup, conv_kernel
from src.models.tensor import Tensor, zeros
from src.models.wavelet import (
    WaveletDecodeParams,
    WaveletEncodeParams,
    init_wavelet_decode_params,
    init_wavelet_encode_params,
    wavelet_decode,
    wavelet_encode,
)
from src.utils.exceptions import DimensionError

DEFAULT_ITERATIONS = 4


class LgeVariant(str, Enum):
    A0 = "A0"
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"
    F = "F"
    G = "G"


# ============ 接线描述 ============

@dataclass(frozen=True)
class LgeWiring:
    """
    变体的拓扑：若干分支（每个分支是串行的节点名序列），
    可选的合并点，以及合并之后的尾部节点
    """
    variant: LgeVariant
    branches: Tuple[Tuple[str, ...], ...] = ()
    merge: Optional[str] = None
    tail: Tuple[str, ...] = ()
    unstable: bool = False
    note: str = ""

    @property
    def num_branches(self) -> int:
        return len(self.branches)

    @property
    def num_merges(self) -> int:
        return 1 if self.merge else 0

    @property
    def is_parallel(self) -> bool:
        return self.num_branches > 1

    @property
    def chain_length(self) -> int:
        """最长串行路径上的计算节点数（不含合并点）"""
        longest = max((len(b) for b in self.branches), default=0)
        return longest + len(self.tail)

    @property
    def nodes(self) -> List[str]:
        names = [n for b in self.branches for n in b]
        if self.merge:
            names.append(self.merge)
        return names + list(self.tail)

    @property
    def edges(self) -> List[Tuple[str, str]]:
        """以 "input"/"output" 为端点的有向边"""
        out: List[Tuple[str, str]] = []
        ends = []
        for branch in self.branches:
            prev = "input"
            for node in branch:
                out.append((prev, node))
                prev = node
            ends.append(prev)
        if self.merge:
            out.extend((end, self.merge) for end in ends)
            ends = [self.merge]
        for node in self.tail:
            out.extend((end, node) for end in ends)
            ends = [node]
        out.extend((end, "output") for end in (ends or ["input"]))
        return out

    def to_dict(self) -> Dict:
        return {
            "variant": self.variant.value,
            "branches": [list(b) for b in self.branches],
            "merge": self.merge,
            "tail": list(self.tail),
            "unstable": self.unstable,
            "note": self.note,
        }


_WIRINGS: Dict[LgeVariant, LgeWiring] = {
    LgeVariant.A0: LgeWiring(LgeVariant.A0, note="identity"),
    LgeVariant.A: LgeWiring(LgeVariant.A, branches=(("wavelet_encode", "wavelet_decode"),)),
    LgeVariant.B: LgeWiring(LgeVariant.B, branches=(("hybrid_encode", "upsample_decode"),)),
    LgeVariant.C: LgeWiring(LgeVariant.C, branches=(("hybrid_encode", "wavelet_decode"),)),
    LgeVariant.D: LgeWiring(LgeVariant.D, branches=(("hybrid_encode", "wavelet_encode", "wavelet_decode"),)),
    LgeVariant.E: LgeWiring(
        LgeVariant.E,
        branches=(("wavelet_encode", "hybrid_encode", "wavelet_decode"),),
        unstable=True,
        note="reported non-convergent",
    ),
    LgeVariant.F: LgeWiring(LgeVariant.F, branches=(("wavelet_encode", "wavelet_decode", "hybrid_encode"),)),
    LgeVariant.G: LgeWiring(
        LgeVariant.G,
        branches=(("wavelet_encode",), ("hybrid_encode",)),
        merge="concat",
        tail=("wavelet_decode",),
    ),
}


def build_variant(variant_id) -> LgeWiring:
    return _WIRINGS[LgeVariant(variant_id)]


# ============ 参数 ============

@dataclass
class LgeBlockParams(ParamGroup):
    """一次迭代的参数；变体用不到的部分为 None"""
    encode: Optional[WaveletEncodeParams] = None
    attention: Optional[AttentionParams] = None
    decode: Optional[WaveletDecodeParams] = None
    stub_kernel: Optional[Tensor] = None      # B: 1×1×2C×C
    s1_projection: Optional[Tensor] = None    # C: 1×1×C×C


@dataclass
class LgeParams(ParamGroup):
    variant: LgeVariant
    blocks: List[LgeBlockParams] = field(default_factory=list)

    def __post_init__(self):
        self.variant = LgeVariant(self.variant)
        if len(self.blocks) < 1:
            raise DimensionError("LGE needs at least one iteration")

    @property
    def iterations(self) -> int:
        return len(self.blocks)

    @property
    def wiring(self) -> LgeWiring:
        return build_variant(self.variant)


def _init_block(variant: LgeVariant, channels: int, rng: np.random.Generator, num_heads: int) -> LgeBlockParams:
    c = channels
    uses = set(build_variant(variant).nodes)
    block = LgeBlockParams()
    if "wavelet_encode" in uses:
        block.encode = init_wavelet_encode_params(c, rng)
    if "hybrid_encode" in uses:
        stride = 1 if variant == LgeVariant.F else 2
        block.attention = init_attention_params(c, rng, num_heads=num_heads, stride=stride)
    if "wavelet_decode" in uses:
        block.decode = init_wavelet_decode_params(c, rng)
    if variant == LgeVariant.B:
        block.stub_kernel = conv_kernel(rng, 1, 2 * c, c, gain=0.7)
    if variant == LgeVariant.C:
        block.s1_projection = conv_kernel(rng, 1, c, c)
    return block


def init_lge_params(
    channels: int,
    variant=LgeVariant.G,
    iterations: int = DEFAULT_ITERATIONS,
    rng: Optional[np.random.Generator] = None,
    num_heads: int = 4,
) -> LgeParams:
    """按变体构造 iterations 份互不共享的参数"""
    if iterations < 1:
        raise DimensionError(f"iterations must be >= 1, got {iterations}")
    if channels % 4:
        raise DimensionError(f"channel count {channels} not divisible by 4")
    variant = LgeVariant(variant)
    rng = rng if rng is not None else np.random.default_rng(0)
    blocks = [_init_block(variant, channels, rng, num_heads) for _ in range(iterations)]
    return LgeParams(variant=variant, blocks=blocks)


# ============ 前向 ============

def _zeros_like(t: Tensor) -> Tensor:
    return zeros(t.shape, dtype=t.dtype)


def _block_forward(x: Tensor, b: LgeBlockParams, variant: LgeVariant) -> Tensor:
    if variant == LgeVariant.G:
        f2 = wavelet_encode(x, b.encode)
        f3 = hybrid_encode(x, b.attention)
        return wavelet_decode(f2, f3, x, b.decode)

    if variant == LgeVariant.A:
        f2 = wavelet_encode(x, b.encode)
        return wavelet_decode(f2, _zeros_like(f2), x, b.decode)

    if variant == LgeVariant.B:
        up = ops.upsample_nearest2x(hybrid_encode(x, b.attention))
        return ops.conv2d(ops.concat([up, x], axis=-1), b.stub_kernel)

    if variant == LgeVariant.C:
        s1 = downsample(x, b.attention)
        f3 = attend_tokens(s1, b.attention)
        f2 = ops.conv2d(s1, b.s1_projection)
        return wavelet_decode(f2, f3, x, b.decode)

    if variant == LgeVariant.D:
        f3 = hybrid_encode(x, b.attention)
        f2 = wavelet_encode(ops.upsample_nearest2x(f3), b.encode)
        return wavelet_decode(f2, f3, x, b.decode)

    if variant == LgeVariant.E:
        f2 = wavelet_encode(x, b.encode)
        f3 = ops.upsample_nearest2x(hybrid_encode(f2, b.attention))
        return wavelet_decode(f2, f3, x, b.decode)

    if variant == LgeVariant.F:
        f2 = wavelet_encode(x, b.encode)
        f5 = wavelet_decode(f2, _zeros_like(f2), x, b.decode)
        return hybrid_encode(f5, b.attention)

    raise ValueError(f"unknown LGE variant {variant}")


def lge_forward(f0: Tensor, params: LgeParams, variant=None) -> Tensor:
    """
    增强 BEV 特征，输出形状与输入相同

    Args:
        f0: H×W×C，H、W 为偶数（变体 E 需被 4 整除），C 被 4 整除
        params: 各迭代参数
        variant: 缺省时取 params.variant；给出时必须一致
    """
    variant = params.variant if variant is None else LgeVariant(variant)
    if variant != params.variant:
        raise ValueError(f"params were built for variant {params.variant.value}, asked for {variant.value}")
    if variant == LgeVariant.A0:
        return f0
    if f0.ndim != 3:
        raise DimensionError(f"lge_forward expects H×W×C, got {f0.shape}")
    h, w, c = f0.shape
    if c % 4:
        raise DimensionError(f"lge_forward: channel count {c} not divisible by 4")
    step = 4 if variant == LgeVariant.E else 2
    if h % step or w % step:
        raise DimensionError(f"lge_forward variant {variant.value} needs extents divisible by {step}, got {h}×{w}")

    x = f0
    for block in params.blocks:
        x = _block_forward(x, block, variant)
    return x
