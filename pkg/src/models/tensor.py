# src/models/tensor.py
"""
最小稠密张量 + 反向传播

布局约定：通道在最后（H×W×C）。
只支持标量与张量之间的广播，其它广播必须显式调用 ops.expand。
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.utils.context import (
    get_active_tape,
    get_default_dtype,
    reset_active_tape,
    set_active_tape,
)
from src.utils.exceptions import DimensionError, NonFiniteError, TapeError

ArrayLike = Union[np.ndarray, Sequence, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    稠密张量

    data 创建后只读；只有 grad 会被 backward 写入，
    参数更新通过 assign() 整体替换 data。
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index", "__weakref__")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        name: Optional[str] = None,
    ):
        arr = np.array(data, dtype=dtype or get_default_dtype())
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor", "(constructor input)")
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None
        self._index: int = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """内部构造：不拷贝、不检查（调用方已检查）"""
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._tape = None
        t._index = -1
        return t

    # ============ 属性 ============

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(np.array(self.data))

    def assign(self, new_data: np.ndarray) -> None:
        """替换参数数值（优化器专用）"""
        new_data = np.asarray(new_data, dtype=self.data.dtype)
        if new_data.shape != self.shape:
            raise DimensionError(f"assign shape {new_data.shape} != {self.shape}")
        if not np.isfinite(new_data).all():
            raise NonFiniteError("assign")
        arr = np.array(new_data)
        arr.flags.writeable = False
        self.data = arr

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # ============ 运算符（委托给 ops） ============

    def __add__(self, other):
        from src.models import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from src.models import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from src.models import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from src.models import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from src.models import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from src.models import ops
        return ops.mul(self, other)

    def __truediv__(self, other):
        from src.models import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; divide by a python scalar")
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from src.models import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from src.models import ops
        return ops.matmul(self, other)


# ============ Tape ============

@dataclass
class Node:
    """tape 上的一个记录节点"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


class Tape:
    """
    有序的运算记录

    用法:
        with Tape() as tape:
            loss = f(x)
        backward(loss)

    节点按执行顺序追加，因此天然是拓扑序。
    单线程、单所有者。
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = set_active_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        reset_active_tape(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        output._tape = self
        output._index = len(self.nodes)
        self.nodes.append(Node(op=op, inputs=inputs, output=output, backward_fn=backward_fn))

    def ops_summary(self) -> Dict[str, int]:
        """各类算子的记录次数（调试用）"""
        counts: Dict[str, int] = {}
        for node in self.nodes:
            counts[node.op] = counts.get(node.op, 0) + 1
        return counts


class no_grad:
    """在此上下文中不记录 tape"""

    def __enter__(self):
        self._token = set_active_tape(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        reset_active_tape(self._token)


def from_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """
    把算子的前向结果包装成 Tensor，并在需要时记录到当前 tape

    Raises:
        NonFiniteError: 输出出现 NaN/Inf
    """
    data = np.asarray(data)
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    if not data.flags.c_contiguous:
        data = np.ascontiguousarray(data)
    tape = get_active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, tuple(inputs), out, backward_fn)
    return out


def backward(root: Tensor) -> Dict[int, np.ndarray]:
    """
    从标量根节点反向传播，写入所有 requires_grad 叶子的 grad

    每次调用都重新计算梯度（覆盖而不是累加），
    因此对同一条 tape 重复调用得到逐位相同的结果。

    Returns:
        {id(leaf): grad}

    Raises:
        TapeError: 根节点不是标量，或没有连接到任何 tape
    """
    if root.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.shape}")

    seed = np.ones_like(root.data)
    if root._tape is None:
        if root.requires_grad:
            root.grad = seed
            return {id(root): seed}
        raise TapeError("backward root is detached (no recorded operation reaches a requires_grad leaf)")

    tape = root._tape
    grads: Dict[int, np.ndarray] = {id(root): seed}
    leaves: Dict[int, Tensor] = {}

    for node in reversed(tape.nodes[: root._index + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if t.is_leaf:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    result: Dict[int, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g
        result[key] = g
    return result


# ============ 序列化 ============
#
# 16 字节头: uint16 rank, uint16 itemsize, 3 × uint32 extents（不足补 0），全部小端
# 之后是小端浮点数据

_HEADER = np.dtype([("rank", "<u2"), ("itemsize", "<u2"), ("extents", "<u4", (3,))])


def tensor_to_bytes(t: Union[Tensor, np.ndarray]) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim > 3:
        raise DimensionError(f"serialization supports rank <= 3, got {arr.ndim}")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    header = np.zeros(1, dtype=_HEADER)
    header["rank"] = arr.ndim
    header["itemsize"] = arr.dtype.itemsize
    header["extents"][0, : arr.ndim] = arr.shape
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    return header.tobytes() + payload.tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < _HEADER.itemsize:
        raise DimensionError("buffer shorter than tensor header")
    header = np.frombuffer(buf[: _HEADER.itemsize], dtype=_HEADER)[0]
    rank = int(header["rank"])
    itemsize = int(header["itemsize"])
    if rank > 3 or itemsize not in (4, 8):
        raise DimensionError(f"corrupt tensor header (rank={rank}, itemsize={itemsize})")
    shape = tuple(int(e) for e in header["extents"][:rank])
    dtype = np.dtype("<f4") if itemsize == 4 else np.dtype("<f8")
    expected = int(np.prod(shape, dtype=np.int64)) * itemsize
    payload = buf[_HEADER.itemsize:]
    if len(payload) != expected:
        raise DimensionError(f"payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return Tensor(arr, dtype=np.float32 if itemsize == 4 else np.float64)


def save_tensor(t: Union[Tensor, np.ndarray], path: Union[str, Path]) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path: Union[str, Path]) -> Tensor:
    return tensor_from_bytes(Path(path).read_bytes())


# ============ 便捷构造 ============

def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad, dtype=dtype)


def parameter(data: ArrayLike, name: Optional[str] = None, dtype=None) -> Tensor:
    """可训练叶子"""
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)
