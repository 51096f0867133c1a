# src/models/wavelet.py
"""
正交 Haar 小波 + 小波编码 / 解码块

2×2 块记为 [[a, b], [c, d]]（行优先）:
    ll = (a+b+c+d)/2   lh = (a−b+c−d)/2
    hl = (a+b−c−d)/2   hh = (a−b−c+d)/2
"""
from dataclasses import dataclass
from typing import List

import numpy as np

from src.models import ops
from src.models.params import ParamGroup, conv_kernel
from src.models.tensor import Tensor
from src.utils.exceptions import DimensionError

# 四个相位在原图中的切片: a=(0,0) b=(0,1) c=(1,0) d=(1,1)
_PHASES = (
    (slice(0, None, 2), slice(0, None, 2), slice(None)),
    (slice(0, None, 2), slice(1, None, 2), slice(None)),
    (slice(1, None, 2), slice(0, None, 2), slice(None)),
    (slice(1, None, 2), slice(1, None, 2), slice(None)),
)

SUBBAND_ORDER = ("ll", "lh", "hl", "hh")


@dataclass
class SubbandSet:
    """单层分解的四个子带，形状一致"""
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    def __post_init__(self):
        shapes = {self.ll.shape, self.lh.shape, self.hl.shape, self.hh.shape}
        if len(shapes) != 1:
            raise DimensionError(f"subband shapes differ: {sorted(shapes)}")
        if self.ll.ndim != 3:
            raise DimensionError(f"subbands must be h×w×C, got {self.ll.shape}")

    @property
    def shape(self):
        return self.ll.shape

    def bands(self) -> List[Tensor]:
        return [self.ll, self.lh, self.hl, self.hh]

    def energy(self) -> float:
        return float(sum(np.sum(np.square(b.data, dtype=np.float64)) for b in self.bands()))


# ============ DWT / IDWT ============

def dwt2_haar(x: Tensor) -> SubbandSet:
    """单层二维 Haar 分解（可微）"""
    if x.ndim != 3:
        raise DimensionError(f"dwt2_haar expects H×W×C, got {x.shape}")
    h, w, _ = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"dwt2_haar needs even extents, got {h}×{w}")
    a, b, c, d = (ops.index(x, key) for key in _PHASES)
    ab_sum, ab_diff = a + b, a - b
    cd_sum, cd_diff = c + d, c - d
    return SubbandSet(
        ll=(ab_sum + cd_sum) * 0.5,
        lh=(ab_diff + cd_diff) * 0.5,
        hl=(ab_sum - cd_sum) * 0.5,
        hh=(ab_diff - cd_diff) * 0.5,
    )


def idwt2_haar(s: SubbandSet) -> Tensor:
    """dwt2_haar 的精确逆变换"""
    h, w, c = s.shape
    full = (2 * h, 2 * w, c)
    lo_sum, lo_diff = s.ll + s.hl, s.ll - s.hl
    hi_sum, hi_diff = s.lh + s.hh, s.lh - s.hh
    a = (lo_sum + hi_sum) * 0.5
    b = (lo_sum - hi_sum) * 0.5
    cc = (lo_diff + hi_diff) * 0.5
    d = (lo_diff - hi_diff) * 0.5
    out = ops.embed(a, full, _PHASES[0])
    for part, key in zip((b, cc, d), _PHASES[1:]):
        out = out + ops.embed(part, full, key)
    return out


def merge_subbands(s: SubbandSet) -> Tensor:
    """按 LL, LH, HL, HH 顺序沿通道拼接"""
    return ops.concat(s.bands(), axis=-1)


def split_subbands(t: Tensor) -> SubbandSet:
    """merge_subbands 的逆：通道四等分"""
    if t.ndim != 3 or t.shape[-1] % 4:
        raise DimensionError(f"split_subbands needs h×w×C with C divisible by 4, got {t.shape}")
    return SubbandSet(*ops.split(t, 4, axis=-1))


# ============ 参数 ============

@dataclass
class WaveletEncodeParams(ParamGroup):
    reduce_kernel: Tensor  # 1×1×C×C/4

    def __post_init__(self):
        _, _, cin, cout = self.reduce_kernel.shape
        if cin % 4 or cout * 4 != cin:
            raise DimensionError(f"reduce kernel must map C -> C/4, got {cin} -> {cout}")

    @property
    def channels(self) -> int:
        return self.reduce_kernel.shape[2]


@dataclass
class WaveletDecodeParams(ParamGroup):
    fw_kernel: Tensor            # 1×1×C/2×C
    depth_kernels: List[Tensor]  # 两个 3×3×C×C
    decode_kernel: Tensor        # 1×1×2C×C
    fp_projection: Tensor        # 1×1×C×C

    def __post_init__(self):
        c = self.fp_projection.shape[3]
        if len(self.depth_kernels) != 2:
            raise DimensionError("depth block needs exactly two 3×3 kernels")
        expected = {
            "fw_kernel": (1, 1, c // 2, c),
            "decode_kernel": (1, 1, 2 * c, c),
            "fp_projection": (1, 1, c, c),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")
        for k in self.depth_kernels:
            if k.shape != (3, 3, c, c):
                raise DimensionError(f"depth kernel must have shape (3, 3, {c}, {c}), got {k.shape}")

    @property
    def channels(self) -> int:
        return self.fp_projection.shape[3]


def init_wavelet_encode_params(channels: int, rng: np.random.Generator) -> WaveletEncodeParams:
    if channels % 4:
        raise DimensionError(f"channel count {channels} not divisible by 4")
    return WaveletEncodeParams(reduce_kernel=conv_kernel(rng, 1, channels, channels // 4))


def init_wavelet_decode_params(channels: int, rng: np.random.Generator) -> WaveletDecodeParams:
    if channels % 4:
        raise DimensionError(f"channel count {channels} not divisible by 4")
    c = channels
    return WaveletDecodeParams(
        fw_kernel=conv_kernel(rng, 1, c // 2, c),
        # 残差支路初始化得小一些，初始时 F4 ≈ Fp + S2
        depth_kernels=[conv_kernel(rng, 3, c, c), conv_kernel(rng, 3, c, c, gain=0.1)],
        decode_kernel=conv_kernel(rng, 1, 2 * c, c, gain=0.7),
        fp_projection=conv_kernel(rng, 1, c, c),
    )


# ============ 编码 / 解码 ============

def wavelet_encode(f0: Tensor, p: WaveletEncodeParams) -> Tensor:
    """
    F1 = Reduce(F0)（C → C/4），F2 = concat(DWT(F1))，半分辨率、C 通道
    """
    if f0.ndim != 3:
        raise DimensionError(f"wavelet_encode expects H×W×C, got {f0.shape}")
    c = f0.shape[-1]
    if c % 4:
        raise DimensionError(f"wavelet_encode: channel count {c} not divisible by 4")
    if p.channels != c:
        raise DimensionError(f"wavelet_encode: params built for C={p.channels}, input has C={c}")
    f1 = ops.conv2d(f0, p.reduce_kernel)
    return merge_subbands(dwt2_haar(f1))


def depth_block(y: Tensor, kernels: List[Tensor]) -> Tensor:
    """y + conv3(relu(conv3(y)))"""
    hidden = ops.relu(ops.conv2d(y, kernels[0], padding=1))
    return y + ops.conv2d(hidden, kernels[1], padding=1)


def wavelet_decode(f2: Tensor, f3: Tensor, f0: Tensor, p: WaveletDecodeParams) -> Tensor:
    """
    S2 = FW(concat(F2, F3))：四等分成 C/2 通道子带 → IDWT → 1×1 投影到 C
    F4 = Depth(Fp + S2)，Fp = 1×1(F0)
    F5 = Decode(concat(F4, F0))：2C → C
    """
    if f2.shape != f3.shape:
        raise DimensionError(f"wavelet_decode: f2 {f2.shape} and f3 {f3.shape} differ")
    if f2.ndim != 3 or f0.ndim != 3:
        raise DimensionError("wavelet_decode expects H×W×C tensors")
    h, w, c = f2.shape
    if f0.shape != (2 * h, 2 * w, c):
        raise DimensionError(f"wavelet_decode: f0 {f0.shape} is not double resolution of {f2.shape}")
    if p.channels != c:
        raise DimensionError(f"wavelet_decode: params built for C={p.channels}, input has C={c}")

    merged = ops.concat([f2, f3], axis=-1)
    s2 = ops.conv2d(idwt2_haar(split_subbands(merged)), p.fw_kernel)
    fp = ops.conv2d(f0, p.fp_projection)
    f4 = depth_block(fp + s2, p.depth_kernels)
    return ops.conv2d(ops.concat([f4, f0], axis=-1), p.decode_kernel)
