# src/models/params.py
"""
参数容器与初始化
"""
import dataclasses
from typing import Any, Dict, Iterator, List, Sequence, Tuple

import numpy as np

from src.models.tensor import Tensor, parameter
from src.utils.exceptions import CheckpointError


class ParamGroup:
    """
    参数分组基类（配合 @dataclass 使用）

    字段可以是 Tensor、嵌套 ParamGroup、二者的列表，或普通超参数（跳过）。
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            yield from _walk(f"{prefix}{f.name}", getattr(self, f.name))

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """按名字回填，名字或形状不一致时报错"""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise CheckpointError(f"missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.assign(arr)

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag


def _walk(name: str, value: Any) -> Iterator[Tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, ParamGroup):
        yield from value.named_parameters(prefix=f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)


# ============ 初始化 ============

def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int, gain: float = 1.0, name: str = None) -> Tensor:
    std = gain * np.sqrt(2.0 / max(1, fan_in))
    return parameter(rng.normal(0.0, std, size=tuple(shape)), name=name)


def xavier_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int, name: str = None) -> Tensor:
    bound = np.sqrt(6.0 / max(1, fan_in + fan_out))
    return parameter(rng.uniform(-bound, bound, size=tuple(shape)), name=name)


def zeros_param(shape: Sequence[int], name: str = None) -> Tensor:
    return parameter(np.zeros(tuple(shape)), name=name)


def full_param(shape: Sequence[int], value: float, name: str = None) -> Tensor:
    return parameter(np.full(tuple(shape), value), name=name)


def conv_kernel(rng: np.random.Generator, k: int, cin_per_group: int, cout: int, gain: float = 1.0) -> Tensor:
    """kh×kw×Cin/g×Cout，He 初始化"""
    return he_normal(rng, (k, k, cin_per_group, cout), fan_in=k * k * cin_per_group, gain=gain)
