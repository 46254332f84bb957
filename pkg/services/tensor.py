"""
张量与反向自动微分

设计原则：
1. 数据统一用 numpy 数组，默认 float32（测试 oracle 可传入 float64，运算保持输入精度）。
2. 每个可微运算是一个 Function 子类：forward 吃 ndarray 吐 ndarray，backward 返回对每个输入的梯度。
3. 动态建图（define-by-run）：每次前向重新记录节点；backward 按逆拓扑序访问每个节点一次。
4. 梯度累加：多次 backward 的梯度相加，调用方负责在两步之间 zero_grad。

归约顺序：所有 sum/mean 走 numpy 的成对求和，同一形状同一输入结果逐位一致。
MAMBAHSI_DEBUG_NAN=1 时每个运算检查输出是否有限，出现 NaN/Inf 立即报错。
"""
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import config

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_debug_nan = config.debug_nan_enabled()


def set_debug_nan(flag: bool):
    """打开/关闭非有限值陷阱（测试用，正常由配置控制）"""
    global _debug_nan
    _debug_nan = bool(flag)


def debug_nan_enabled() -> bool:
    return _debug_nan


@contextmanager
def no_grad():
    """上下文内的运算不记录计算图"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度按原形状求和还原"""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Function:
    """可微运算基类，子类实现 forward / backward"""

    def __init__(self, *parents: "Tensor"):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **attrs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} 未实现 forward")

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError(f"{type(self).__name__} 未实现 backward")

    @classmethod
    def apply(cls, *inputs: "Tensor", **attrs) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **attrs)
        if _debug_nan and not np.all(np.isfinite(out)):
            bad = np.argwhere(~np.isfinite(out))[0].tolist()
            raise FloatingPointError(f"运算 {cls.__name__} 输出非有限值，首个位置 {bad}")
        requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _node=fn if requires_grad else None)


class Tensor:
    """稠密张量：data 为行优先 ndarray，node 指向产生它的运算（叶子为 None）"""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = None,
                 _node: Function = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = _node
        self.name = name

    # ---------------- 基本属性 ----------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # ---------------- 反向传播 ----------------
    def backward(self):
        """对标量损失做反向传播，梯度累加到所有 requires_grad 的张量上"""
        if self.data.size != 1:
            raise ValueError(f"backward 只能在标量上调用，当前形状 {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward 的输入不在计算图上（requires_grad=False）")

        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            if t.node is None:
                continue
            g = grads.get(id(t))
            if g is None:
                continue
            parent_grads = t.node.backward(g)
            for parent, pg in zip(t.node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg), parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for t in order:
            g = grads.get(id(t))
            if g is None:
                continue
            g = g.astype(t.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g

    # ---------------- 运算符 ----------------
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    def __radd__(self, other):
        return Add.apply(_lift(other, self), self)

    def __sub__(self, other):
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other):
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    def __rmul__(self, other):
        return Mul.apply(_lift(other, self), self)

    def __truediv__(self, other):
        return Div.apply(self, _lift(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_lift(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return Index.apply(self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Permute.apply(self, axes=axes)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return Exp.apply(self)


def _lift(value, like: Tensor) -> Tensor:
    """标量/数组转为常量张量，精度跟随另一个操作数"""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), requires_grad=False)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _topo_order(root: Tensor) -> List[Tensor]:
    """迭代 DFS 后序：父节点总在子节点之前"""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def _check_same_shape(op: str, *tensors: Tensor):
    shapes = [t.shape for t in tensors]
    if any(s != shapes[0] for s in shapes[1:]):
        raise ValueError(f"{op}: 形状不一致 {shapes}")


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: 形状无法广播 {a.shape} 与 {b.shape}") from None


# ==================== 逐元素运算 ====================

class Add(Function):
    def forward(self, a, b):
        _check_broadcast("add", a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast("sub", a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        _check_broadcast("div", a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Softplus(Function):
    """log(1 + e^x)，用 logaddexp 保证大输入不溢出"""

    def forward(self, a):
        self.a = a
        return np.logaddexp(np.zeros((), dtype=a.dtype), a)

    def backward(self, grad):
        return (grad * _sigmoid(self.a),)


class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


class SiLU(Function):
    """x * sigmoid(x)"""

    def forward(self, a):
        self.a = a
        self.sig = _sigmoid(a)
        return a * self.sig

    def backward(self, grad):
        s = self.sig
        return (grad * (s + self.a * s * (1 - s)),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 分正负两支计算，避免 exp 溢出
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


# ==================== 线性代数 ====================

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul: 形状不匹配 {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        ga = grad @ np.swapaxes(b, -1, -2)
        if b.ndim == 2:
            # 常见的 (…, K) @ (K, N)：直接展平前导维度，省掉广播中间量
            gb = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ grad
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(as_tensor(a), as_tensor(b))


def conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """通道维（最后一维）上的 1x1 卷积：x (…, Cin) · weight (Cin, Cout) + bias (Cout)"""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"conv1x1: 输入通道 {x.shape} 与权重 {weight.shape} 不匹配")
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"conv1x1: 偏置形状 {bias.shape} 应为 {(weight.shape[1],)}")
        out = out + bias
    return out


# ==================== 归一化 / softmax ====================

class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.out = shifted - lse
        return self.out

    def backward(self, grad):
        s = np.exp(self.out)
        return (grad - s * grad.sum(axis=self.axis, keepdims=True),)


class GroupNorm(Function):
    """
    通道在最后一维的组归一化：x (B, …, C)。
    每个样本、每组 C/G 个通道，在组内通道与全部空间位置上求均值/方差（同 torch.nn.GroupNorm）。
    """

    def forward(self, x, weight, bias, groups=4, eps=1e-5):
        if x.ndim < 2:
            raise ValueError(f"group_norm: 输入至少二维，当前 {x.shape}")
        channels = x.shape[-1]
        if channels % groups != 0:
            raise ValueError(f"group_norm: 通道数 {channels} 不能被组数 {groups} 整除")
        if weight.shape != (channels,) or bias.shape != (channels,):
            raise ValueError(f"group_norm: 仿射参数形状 {weight.shape}/{bias.shape} 应为 {(channels,)}")
        self.in_shape = x.shape
        batch = x.shape[0]
        xg = x.reshape(batch, -1, groups, channels // groups)
        mean = xg.mean(axis=(1, 3), keepdims=True)
        var = ((xg - mean) ** 2).mean(axis=(1, 3), keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = (xg - mean) * self.rstd
        self.weight = weight
        self.groups = groups
        xhat = self.xhat.reshape(x.shape)
        return xhat * weight + bias

    def backward(self, grad):
        channels = self.in_shape[-1]
        batch = self.in_shape[0]
        reduce_axes = tuple(range(len(self.in_shape) - 1))
        xhat = self.xhat.reshape(self.in_shape)
        gw = (grad * xhat).sum(axis=reduce_axes)
        gb = grad.sum(axis=reduce_axes)
        gxhat = (grad * self.weight).reshape(batch, -1, self.groups, channels // self.groups)
        m1 = gxhat.mean(axis=(1, 3), keepdims=True)
        m2 = (gxhat * self.xhat).mean(axis=(1, 3), keepdims=True)
        gx = self.rstd * (gxhat - m1 - self.xhat * m2)
        return gx.reshape(self.in_shape), gw, gb


def group_norm(x: Tensor, weight: Tensor, bias: Tensor, groups: int = 4, eps: float = 1e-5) -> Tensor:
    return GroupNorm.apply(x, weight, bias, groups=groups, eps=eps)


# ==================== 形状运算 ====================

class Reshape(Function):
    def forward(self, a, shape=()):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ValueError(f"reshape: 无法把 {a.shape} 变为 {tuple(shape)}") from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Permute(Function):
    def forward(self, a, axes=()):
        if sorted(axes) != list(range(a.ndim)):
            raise ValueError(f"permute: 轴 {tuple(axes)} 与维数 {a.ndim} 不符")
        self.axes = tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Index(Function):
    """切片 / 布尔掩码 / 整数索引取值；反向把梯度散回原位置，未选中的位置梯度为 0"""

    def forward(self, a, index=None):
        self.in_shape = a.shape
        self.index = index
        try:
            return np.array(a[index])
        except IndexError as e:
            raise ValueError(f"index: 形状 {a.shape} 上的索引无效: {e}") from None

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        if _has_integer_array(self.index):
            # 整数数组索引可能重复，必须用 add.at 累加
            np.add.at(out, self.index, grad)
        else:
            out[self.index] = grad
        return (out,)


def _has_integer_array(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    for part in parts:
        if isinstance(part, (list, np.ndarray)) and np.asarray(part).dtype.kind in "iu":
            return True
    return False


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ValueError(f"concat: 形状不兼容 {[a.shape for a in arrays]} (axis={axis})") from None

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        self.count = a.size // max(out.size, 1) if a.size else 1
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.in_shape).copy(),)


# ==================== 函数式入口 ====================

def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def silu(x: Tensor) -> Tensor:
    return SiLU.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def mask_select(x: Tensor, mask: np.ndarray) -> Tensor:
    """按布尔掩码取出前导维度上的元素：x (…mask.shape, F) -> (n, F)"""
    mask = np.asarray(mask, dtype=bool)
    if x.shape[:mask.ndim] != mask.shape:
        raise ValueError(f"mask_select: 掩码形状 {mask.shape} 与张量 {x.shape} 不匹配")
    return Index.apply(x, index=mask)


# ==================== 有限差分检查 ====================

# 中心差分的缺省步长，按精度区分
_FD_STEP = {np.dtype(np.float64): 1e-5, np.dtype(np.float32): 1e-2}


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Union[Tensor, np.ndarray],
                      step: Optional[float] = None, dtype=None) -> float:
    """
    逐元素相对误差的最大值:
        max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)
    x 保持调用方的精度求值；dtype=np.float64 时复制为 float64（oracle 用）。
    step 缺省按精度取 _FD_STEP；差分分母是扰动后实际存下的 x+ 与 x- 之差。
    f 必须是确定性的标量函数。
    """
    base = x.data if isinstance(x, Tensor) else np.asarray(x)
    if dtype is None:
        dtype = base.dtype if base.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    step = _FD_STEP.get(dtype, 1e-3) if step is None else step

    xt = Tensor(base.astype(dtype), requires_grad=True, dtype=dtype)
    f(xt).backward()
    if xt.grad is None:
        raise ValueError("finite_diff_check: f 的输出不依赖 x")
    analytic = np.asarray(xt.grad, dtype=np.float64).reshape(-1)

    numeric = np.zeros(analytic.size, dtype=np.float64)
    flat = xt.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            x_plus = float(flat[i])
            f_plus = f(xt).item()
            flat[i] = orig - step
            x_minus = float(flat[i])
            f_minus = f(xt).item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (x_plus - x_minus)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))
