"""
Adam 优化器（带偏差修正）

梯度不在这里清零，调用方每步后自己 zero_grad。
"""
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from services.tensor import Tensor


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState):
    """按标准 Adam 规则原地更新参数，step_count 加一"""
    for i, p in enumerate(params):
        if p.grad is None:
            label = p.name or f"#{i}"
            raise RuntimeError(f"参数 {label} 没有梯度，无法执行 Adam 更新")

    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError(f"Adam 状态有 {len(state.first_moment)} 个缓冲区，参数却有 {len(params)} 个")

    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t

    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if m.shape != p.shape:
            raise ValueError(f"参数 {p.name} 形状 {p.shape} 与 Adam 缓冲区 {m.shape} 不一致")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


def zero_grad(params: Sequence[Tensor]):
    for p in params:
        p.grad = None
