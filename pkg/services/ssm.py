"""
状态空间序列核心

- LTI 形式：对角 A、B、C、Δ；ZOH / 双线性离散化；递推与卷积两种求值（二者等价）。
- 选择性扫描：Δ、B、C 由每个 token 计算，递推 h_t = exp(Δ_t A) h_{t-1} + Δ_t B_t x_t，
  y_t = C_t·h_t + D·x_t。前向保存隐状态，反向走伴随递推，整个扫描是计算图上的一个节点。
- Mamba 块：输入投影(两支) → 深度因果卷积 → SiLU → 选择性扫描 → 门控 → 输出投影。

A 限定为对角（每通道长度 N 的向量），以 A = -exp(A_log) 存储保证恒负。
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from services import tensor as T
from services.tensor import Function, Tensor


class ScanMode(str, Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"

    @classmethod
    def parse(cls, value) -> "ScanMode":
        if isinstance(value, ScanMode):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"未知扫描模式 {value}，可选 sequential / parallel") from None


# ==================== LTI 形式 ====================

@dataclass
class LtiSsm:
    """对角 LTI 状态空间：A (N,) 对角元，B (N,)，C (N,)，时间尺度 delta > 0"""
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float

    def __post_init__(self):
        self.A = np.asarray(self.A)
        self.B = np.asarray(self.B)
        self.C = np.asarray(self.C)
        if not (self.A.shape == self.B.shape == self.C.shape) or self.A.ndim != 1:
            raise ValueError(f"LtiSsm: A/B/C 需为同长度向量，当前 {self.A.shape}/{self.B.shape}/{self.C.shape}")
        if not self.delta > 0:
            raise ValueError(f"LtiSsm: delta 必须为正，当前 {self.delta}")
        for label, arr in (("A", self.A), ("B", self.B), ("C", self.C)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"LtiSsm: {label} 含非有限值")

    @property
    def state_size(self) -> int:
        return self.A.shape[0]

    def discretize(self, method: str = "zoh") -> Tuple[np.ndarray, np.ndarray]:
        return discretize(method, self.A, self.B, self.delta)


def zoh_discretize(A, B, delta, exact: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    零阶保持离散化（对角 A，逐元素）:
        Abar = exp(ΔA)
        exact: Bbar = (exp(ΔA) - 1) / A · B        （A→0 时取极限 ΔB）
        否则:  Bbar = Δ · B                          （选择性扫描使用的简化规则）
    """
    A = np.asarray(A)
    B = np.asarray(B)
    delta = np.asarray(delta)
    if np.any(delta <= 0):
        raise ValueError(f"zoh_discretize: delta 必须为正，最小值 {float(np.min(delta))}")
    dA = delta * A
    Abar = np.exp(dA)
    if not exact:
        return Abar, delta * B
    safe_A = np.where(A == 0, 1, A)
    Bbar = np.where(A == 0, delta * B, np.expm1(dA) / safe_A * B)
    return Abar, Bbar


def bilinear_discretize(A, B, delta) -> Tuple[np.ndarray, np.ndarray]:
    """双线性(Tustin)离散化: Abar = (1 - ΔA/2)^-1 (1 + ΔA/2)，Bbar = (1 - ΔA/2)^-1 ΔB"""
    A = np.asarray(A)
    delta = np.asarray(delta)
    if np.any(delta <= 0):
        raise ValueError(f"bilinear_discretize: delta 必须为正，最小值 {float(np.min(delta))}")
    inv = 1.0 / (1.0 - delta * A / 2.0)
    return inv * (1.0 + delta * A / 2.0), inv * delta * np.asarray(B)


def discretize(method: str, A, B, delta) -> Tuple[np.ndarray, np.ndarray]:
    if method == "zoh":
        return zoh_discretize(A, B, delta, exact=True)
    if method == "euler":
        return zoh_discretize(A, B, delta, exact=False)
    if method == "bilinear":
        return bilinear_discretize(A, B, delta)
    raise ValueError(f"未知离散化方法 {method}，可选 zoh / euler / bilinear")


def scan_recurrent(Abar, Bbar, C, x, h0=None, return_state: bool = False):
    """
    线性递推 h_t = Abar·h_{t-1} + Bbar·x_t，y_t = C·h_t。
    Abar/Bbar/C 可为 (N,)（时不变）或 (L, N)（逐步）；x 为长度 L 的标量序列。
    return_state=True 时额外返回末状态，可跨分块续算。
    """
    x = np.asarray(x)
    length = x.shape[0]
    Abar = np.asarray(Abar)
    dtype = np.result_type(Abar, Bbar, C, x)
    n = Abar.shape[-1]
    h = np.zeros(n, dtype=dtype) if h0 is None else np.array(h0, dtype=dtype)
    Abar_t = np.broadcast_to(Abar, (length, n))
    Bbar_t = np.broadcast_to(np.asarray(Bbar), (length, n))
    C_t = np.broadcast_to(np.asarray(C), (length, n))
    y = np.zeros(length, dtype=dtype)
    for t in range(length):
        h = Abar_t[t] * h + Bbar_t[t] * x[t]
        y[t] = C_t[t] @ h
    if return_state:
        return y, h
    return y


def lti_kernel(Abar, Bbar, C, length: int) -> np.ndarray:
    """卷积核 K = (C·Bbar, C·Abar·Bbar, …, C·Abar^{L-1}·Bbar)"""
    Abar = np.asarray(Abar)
    powers = Abar[None, :] ** np.arange(length, dtype=Abar.dtype)[:, None]
    return powers @ (np.asarray(C) * np.asarray(Bbar))


def scan_convolutional(Abar, Bbar, C, x, use_fft: bool = False) -> np.ndarray:
    """y = x * K 的因果卷积形式，仅适用于时不变参数"""
    Abar = np.asarray(Abar)
    if Abar.ndim != 1 or np.ndim(Bbar) != 1 or np.ndim(C) != 1:
        raise ValueError("scan_convolutional 只支持时不变(LTI)参数，收到逐 token 参数")
    x = np.asarray(x)
    length = x.shape[0]
    if length == 0:
        return np.zeros(0, dtype=np.result_type(Abar, x))
    kernel = lti_kernel(Abar, Bbar, C, length)
    if use_fft:
        size = 2 * length
        y = np.fft.irfft(np.fft.rfft(x, size) * np.fft.rfft(kernel, size), size)[:length]
        return y.astype(np.result_type(kernel, x))
    return np.convolve(x, kernel)[:length]


# ==================== 并行前缀扫描 ====================

def _scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """沿 axis=1 顺序求 h_t = a_t h_{t-1} + b_t (h_{-1}=0)"""
    h = np.empty_like(b)
    state = np.zeros_like(b[:, 0])
    for t in range(b.shape[1]):
        state = a[:, t] * state + b[:, t]
        h[:, t] = state
    return h


def _scan_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Blelloch 平衡树前缀扫描（上扫 + 下扫），结合算子
        (a, b) ∘ (a', b') = (a·a', a'·b + b')
    归约树固定，结果逐次运行一致。
    """
    length = b.shape[1]
    if length == 0:
        return b.copy()
    size = 1 << max(0, (length - 1).bit_length())
    pad = size - length
    if pad:
        pad_shape = (b.shape[0], pad) + b.shape[2:]
        a_s = np.concatenate([a, np.ones(pad_shape, dtype=a.dtype)], axis=1)
        b_s = np.concatenate([b, np.zeros(pad_shape, dtype=b.dtype)], axis=1)
    else:
        a_s = a.copy()
        b_s = b.copy()
    elem_a = a_s.copy()
    elem_b = b_s.copy()

    # 上扫：右节点保存其子树的复合
    d = 1
    while d < size:
        right = slice(2 * d - 1, size, 2 * d)
        left = slice(d - 1, size, 2 * d)
        b_s[:, right] = a_s[:, right] * b_s[:, left] + b_s[:, right]
        a_s[:, right] = a_s[:, right] * a_s[:, left]
        d *= 2

    # 下扫：得到排他前缀
    a_s[:, size - 1] = 1
    b_s[:, size - 1] = 0
    d = size // 2
    while d >= 1:
        right = slice(2 * d - 1, size, 2 * d)
        left = slice(d - 1, size, 2 * d)
        tmp_a = a_s[:, left].copy()
        tmp_b = b_s[:, left].copy()
        a_s[:, left] = a_s[:, right]
        b_s[:, left] = b_s[:, right]
        # 右子前缀 = 父前缀 ∘ 左子树复合
        b_s[:, right] = tmp_a * b_s[:, right] + tmp_b
        a_s[:, right] = a_s[:, right] * tmp_a
        d //= 2

    # 排他前缀 ∘ 自身元素 = 包含前缀
    h = elem_a * b_s + elem_b
    return h[:, :length]


def linear_scan(a: np.ndarray, b: np.ndarray, mode: ScanMode = ScanMode.SEQUENTIAL) -> np.ndarray:
    """h_t = a_t h_{t-1} + b_t，a/b 形状 (batch, L, …)，序列轴为 1"""
    if ScanMode.parse(mode) is ScanMode.PARALLEL:
        return _scan_parallel(a, b)
    return _scan_sequential(a, b)


# ==================== 选择性扫描（融合算子） ====================

class SelectiveScan(Function):
    """
    u (B, L, E)，delta (B, L, E)，A (E, N)，Bt (B, L, N)，Ct (B, L, N)，D (E,) -> y (B, L, E)

    前向: h_t = exp(Δ_t A) ⊙ h_{t-1} + (Δ_t B_t) x_t，y_t = C_t·h_t + D ⊙ u_t
    反向: g_t = C_t ⊗ dy_t + exp(Δ_{t+1} A) ⊙ g_{t+1}（逆序线性递推，与前向同一扫描实现）
    """

    def forward(self, u, delta, A, Bt, Ct, D, mode=ScanMode.SEQUENTIAL):
        self.mode = ScanMode.parse(mode)
        dtype = np.result_type(u, delta, A, Bt, Ct, D)
        u, delta, A, Bt, Ct, D = (np.asarray(v, dtype=dtype) for v in (u, delta, A, Bt, Ct, D))
        self.saved = (u, delta, A, Bt, Ct, D)
        keep_states = any(p.requires_grad for p in self.parents) and T._grad_enabled

        if self.mode is ScanMode.SEQUENTIAL and not keep_states:
            # 不需要反向时逐步计算，不保存 (B, L, E, N) 的中间量
            y = self._forward_streaming(u, delta, A, Bt, Ct, D)
        else:
            dA = np.exp(delta[..., None] * A)
            dBu = (delta * u)[..., None] * Bt[:, :, None, :]
            h = linear_scan(dA, dBu, self.mode)
            y = np.einsum('blen,bln->ble', h, Ct) + u * D
            if keep_states:
                self.dA, self.h = dA, h
        if T.debug_nan_enabled() and not np.all(np.isfinite(y)):
            batch, pos, channel = np.argwhere(~np.isfinite(y))[0].tolist()
            raise FloatingPointError(f"选择性扫描出现非有限值: 序列 {batch}, 通道 {channel}, 位置 {pos}")
        return y

    @staticmethod
    def _forward_streaming(u, delta, A, Bt, Ct, D):
        batch, length, channels = u.shape
        h = np.zeros((batch, channels, A.shape[1]), dtype=u.dtype)
        y = np.empty_like(u)
        for t in range(length):
            h = np.exp(delta[:, t, :, None] * A) * h + (delta[:, t] * u[:, t])[..., None] * Bt[:, t, None, :]
            y[:, t] = np.einsum('ben,bn->be', h, Ct[:, t])
        return y + u * D

    def backward(self, grad):
        u, delta, A, Bt, Ct, D = self.saved
        dA, h = self.dA, self.h
        dy = grad

        gD = (dy * u).sum(axis=(0, 1))
        gu = dy * D
        gC = np.einsum('ble,blen->bln', dy, h)

        # 逆序递推：系数为下一步的 exp(ΔA)，最后一步后面没有状态
        a_next = np.concatenate([dA[:, 1:], np.ones_like(dA[:, :1])], axis=1)
        src = dy[..., None] * Ct[:, :, None, :]
        g = linear_scan(a_next[:, ::-1], src[:, ::-1], self.mode)[:, ::-1]

        gB_e = np.einsum('blen,bln->ble', g, Bt)
        gu = gu + delta * gB_e
        gdelta = gB_e * u
        gBt = np.einsum('blen,ble->bln', g, delta * u)

        h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
        g_exp = g * h_prev * dA
        gdelta = gdelta + np.einsum('blen,en->ble', g_exp, A)
        gA = np.einsum('blen,ble->en', g_exp, delta)
        return gu, gdelta, gA, gBt, gC, gD


def scan_selective(u: Tensor, delta: Tensor, A: Tensor, Bt: Tensor, Ct: Tensor, D: Tensor,
                   mode=ScanMode.SEQUENTIAL) -> Tensor:
    """融合选择性扫描算子（参数已由调用方算好）"""
    if u.ndim != 3 or delta.shape != u.shape:
        raise ValueError(f"scan_selective: u {u.shape} 与 delta {delta.shape} 需同为 (B, L, E)")
    if A.shape[0] != u.shape[2] or Bt.shape != Ct.shape or Bt.shape[:2] != u.shape[:2] \
            or Bt.shape[2] != A.shape[1] or D.shape != (u.shape[2],):
        raise ValueError(f"scan_selective: 形状不匹配 u={u.shape} A={A.shape} B={Bt.shape} "
                         f"C={Ct.shape} D={D.shape}")
    return SelectiveScan.apply(u, delta, A, Bt, Ct, D, mode=mode)


# ==================== 深度因果卷积 ====================

class CausalDepthwiseConv1d(Function):
    """x (B, L, E)，weight (E, k)，bias (E,)；左侧补 k-1 个零，输出只看当前及之前的 token"""

    def forward(self, x, weight, bias):
        if x.ndim != 3 or weight.shape[0] != x.shape[2] or bias.shape != (x.shape[2],):
            raise ValueError(f"causal_conv1d: 输入 {x.shape} 与权重 {weight.shape}/{bias.shape} 不匹配")
        k = weight.shape[1]
        length = x.shape[1]
        self.k, self.length = k, length
        pad = np.zeros((x.shape[0], k - 1, x.shape[2]), dtype=x.dtype)
        self.xpad = np.concatenate([pad, x], axis=1)
        self.weight = weight
        out = np.zeros(x.shape, dtype=np.result_type(x, weight, bias))
        for j in range(k):
            out += weight[:, j] * self.xpad[:, j:j + length]
        return out + bias

    def backward(self, grad):
        k, length = self.k, self.length
        gxpad = np.zeros(self.xpad.shape, dtype=grad.dtype)
        gw = np.zeros(self.weight.shape, dtype=grad.dtype)
        for j in range(k):
            gxpad[:, j:j + length] += grad * self.weight[:, j]
            gw[:, j] = (grad * self.xpad[:, j:j + length]).sum(axis=(0, 1))
        gb = grad.sum(axis=(0, 1))
        return gxpad[:, k - 1:], gw, gb


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return CausalDepthwiseConv1d.apply(x, weight, bias)


# ==================== Mamba 块参数 ====================

@dataclass
class SelectiveSsmParams:
    """一个 Mamba 块的全部可学习参数（d_model -> d_inner=expand·d_model）"""
    in_proj: Tensor        # (d_model, 2·d_inner)，主支 + 门控支
    conv_weight: Tensor    # (d_inner, d_conv)
    conv_bias: Tensor      # (d_inner,)
    x_proj: Tensor         # (d_inner, dt_rank + 2N)，产生 Δ 低秩输入、B_t、C_t
    dt_proj_weight: Tensor  # (dt_rank, d_inner)
    dt_proj_bias: Tensor   # (d_inner,)
    A_log: Tensor          # (d_inner, N)，A = -exp(A_log)
    D: Tensor              # (d_inner,) 跳连系数
    out_proj: Tensor       # (d_inner, d_model)

    @property
    def d_model(self) -> int:
        return self.in_proj.shape[0]

    @property
    def d_inner(self) -> int:
        return self.conv_weight.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj_weight.shape[0]

    @property
    def d_conv(self) -> int:
        return self.conv_weight.shape[1]


def default_dt_rank(d_model: int) -> int:
    return max(1, math.ceil(d_model / 16))


def _param(value: np.ndarray, name: str) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float32), requires_grad=True, name=name)


def init_selective_params(d_model: int, rng: np.random.Generator, d_state: int = 16, expand: int = 2,
                          d_conv: int = 4, dt_rank: Optional[int] = None, dt_min: float = 1e-3,
                          dt_max: float = 1e-1, prefix: str = "mamba") -> SelectiveSsmParams:
    """
    初始化：
      - 线性投影 U(-1/sqrt(fan_in), 1/sqrt(fan_in))，输出投影同样是小幅均匀噪声（不置零）
      - A_n = -(n+1)（n 为状态下标）
      - Δ 偏置使 softplus 输出在 [dt_min, dt_max] 内均匀分布
      - D 全 1
    """
    d_inner = expand * d_model
    rank = dt_rank if dt_rank is not None else default_dt_rank(d_model)

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    dt = rng.uniform(dt_min, dt_max, size=d_inner)
    # softplus 的反函数
    dt_bias = dt + np.log(-np.expm1(-dt))
    A = np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))

    return SelectiveSsmParams(
        in_proj=_param(uniform((d_model, 2 * d_inner), d_model), f"{prefix}.in_proj"),
        conv_weight=_param(uniform((d_inner, d_conv), d_conv), f"{prefix}.conv_weight"),
        conv_bias=_param(uniform((d_inner,), d_conv), f"{prefix}.conv_bias"),
        x_proj=_param(uniform((d_inner, rank + 2 * d_state), d_inner), f"{prefix}.x_proj"),
        dt_proj_weight=_param(uniform((rank, d_inner), rank), f"{prefix}.dt_proj_weight"),
        dt_proj_bias=_param(dt_bias, f"{prefix}.dt_proj_bias"),
        A_log=_param(np.log(A), f"{prefix}.A_log"),
        D=_param(np.ones(d_inner), f"{prefix}.D"),
        out_proj=_param(uniform((d_inner, d_model), d_inner), f"{prefix}.out_proj"),
    )


# ==================== 前向 ====================

def selective_scan(params: SelectiveSsmParams, x: Tensor, mode=ScanMode.PARALLEL) -> Tensor:
    """x (B, L, E) -> (B, L, E)：由每个 token 计算 Δ_t、B_t、C_t，再做选择性扫描"""
    if x.ndim != 3 or x.shape[2] != params.d_inner:
        raise ValueError(f"selective_scan: 输入 {x.shape} 的通道应为 {params.d_inner}")
    rank, n = params.dt_rank, params.d_state
    x_dbl = T.matmul(x, params.x_proj)
    dt_in = x_dbl[..., :rank]
    Bt = x_dbl[..., rank:rank + n]
    Ct = x_dbl[..., rank + n:]
    delta = T.softplus(T.matmul(dt_in, params.dt_proj_weight) + params.dt_proj_bias)
    A = -T.exp(params.A_log)
    return scan_selective(x, delta, A, Bt, Ct, params.D, mode=mode)


def mamba_block_forward(params: SelectiveSsmParams, tokens: Tensor, mode=ScanMode.PARALLEL) -> Tensor:
    """
    标准 Mamba 块，tokens (B, L, D) 或 (L, D)，输出同形状。
    残差不在这里加，由调用方处理。
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.reshape(1, *tokens.shape)
    if tokens.ndim != 3 or tokens.shape[2] != params.d_model:
        raise ValueError(f"mamba_block_forward: 输入 {tokens.shape} 的宽度应为 {params.d_model}")
    batch, length, width = tokens.shape
    if length == 0:
        out = Tensor(np.zeros((batch, 0, width), dtype=tokens.dtype))
        return out.reshape(0, width) if squeeze else out

    d_inner = params.d_inner
    xz = T.matmul(tokens, params.in_proj)
    x = xz[..., :d_inner]
    z = xz[..., d_inner:]
    x = T.silu(causal_conv1d(x, params.conv_weight, params.conv_bias))
    y = selective_scan(params, x, mode=mode)
    y = y * T.silu(z)
    out = T.matmul(y, params.out_proj)
    return out.reshape(length, width) if squeeze else out
