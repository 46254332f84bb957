"""
编码块计算量的解析模型（Mamba 版 vs 自注意力版）

约定：一次乘加 = 2 FLOPs；exp 记 4 FLOPs；结果以 GFLOPs（10⁹）给出。
Mamba 版对序列长度 L 严格线性，自注意力版在 SpaMB 中对 L = H·W 做 L×L 注意力，含 L² 项。
"""
from dataclasses import dataclass, field
from typing import Dict

from services.mamba_hsi import ModelConfig
from services.ssm import default_dt_rank

VARIANTS = ("mamba", "self_attention")

EXP = 4
SILU = EXP + 3          # exp、加 1、除、乘
SOFTPLUS = EXP + 2      # exp、加 1、log
GN_PER_ELEMENT = 8      # 均值、方差、归一化、仿射


@dataclass
class FlopModel:
    """每个组件的 FLOPs（未换算成 G）"""
    variant: str
    height: int
    width: int
    components: Dict[str, float] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.height * self.width

    @property
    def total(self) -> float:
        return float(sum(self.components.values()))

    @property
    def gflops(self) -> float:
        return self.total / 1e9


def mamba_flops(length: int, d_model: int, d_inner: int, d_state: int, dt_rank: int, d_conv: int) -> float:
    """一条长度为 L 的序列经过一个 Mamba 块"""
    L, d, E, N, R, k = length, d_model, d_inner, d_state, dt_rank, d_conv
    in_proj = 2 * L * d * 2 * E
    conv = 2 * L * E * k + L * E + L * E * SILU
    x_proj = 2 * L * E * (R + 2 * N)
    dt_proj = 2 * L * R * E + L * E + L * E * SOFTPLUS
    # 每个 (t, e, n)：exp(Δ·A)、Δ·B·u、h 更新、C·h 累加
    scan = 11 * L * E * N + 2 * L * E
    gate = L * E * SILU + L * E
    out_proj = 2 * L * E * d
    return float(in_proj + conv + x_proj + dt_proj + scan + gate + out_proj)


def attention_flops(length: int, width: int) -> float:
    """单头 QKV 自注意力加输出投影"""
    L, d = length, width
    qkv = 2 * L * d * 3 * d
    scores = 2 * L * L * d
    softmax = EXP * L * L + L * L
    mix = 2 * L * L * d
    out = 2 * L * d * d
    return float(qkv + scores + softmax + mix + out)


def _branch_tail(pixels: int, width: int) -> float:
    """GN + SiLU + 残差"""
    return float(pixels * width * (GN_PER_ELEMENT + SILU + 1))


def _spa_flops(pixels: int, cfg: ModelConfig, variant: str) -> float:
    D = cfg.embed_dim
    if variant == "mamba":
        core = mamba_flops(pixels, D, cfg.expand * D, cfg.d_state, default_dt_rank(D), cfg.d_conv)
    else:
        core = attention_flops(pixels, D)
    return core + _branch_tail(pixels, D)


def _spe_flops(pixels: int, cfg: ModelConfig, variant: str) -> float:
    G, M = cfg.spectral_groups, cfg.group_width
    if variant == "mamba":
        per_pixel = mamba_flops(G, M, cfg.expand * M, cfg.d_state, default_dt_rank(M), cfg.d_conv)
    else:
        per_pixel = attention_flops(G, M)
    return pixels * per_pixel + _branch_tail(pixels, cfg.embed_dim)


def _fusion_flops(pixels: int, cfg: ModelConfig) -> float:
    D = cfg.embed_dim
    if cfg.branches != "both":
        return 0.0
    if cfg.fusion == "sum":
        return float(2 * pixels * D)
    extra = 2 * EXP + 3 if cfg.fusion == "softmax" else 0
    return float(4 * pixels * D + extra)


def flop_breakdown(height: int, width: int, cfg: ModelConfig, variant: str = "mamba") -> FlopModel:
    if variant not in VARIANTS:
        raise ValueError(f"未知变体 {variant}，可选 {VARIANTS}")
    if height < 1 or width < 1:
        raise ValueError(f"图像尺寸必须为正: {height}×{width}")
    pixels = height * width
    model = FlopModel(variant=variant, height=height, width=width)
    if cfg.branches in ("both", "spa"):
        model.components['spamb'] = _spa_flops(pixels, cfg, variant)
    if cfg.branches in ("both", "spe"):
        model.components['spemb'] = _spe_flops(pixels, cfg, variant)
    model.components['ssfm'] = _fusion_flops(pixels, cfg)
    return model


def flops_encoder_block(height: int, width: int, cfg: ModelConfig, variant: str = "mamba") -> float:
    """一个编码块（SpaMB + SpeMB + SSFM）的 GFLOPs"""
    return flop_breakdown(height, width, cfg, variant).gflops


def _mamba_param_count(d_model: int, cfg: ModelConfig) -> int:
    E, N, R, k = cfg.expand * d_model, cfg.d_state, default_dt_rank(d_model), cfg.d_conv
    return d_model * 2 * E + E * k + E + E * (R + 2 * N) + R * E + E + E * N + E + E * d_model


def _core_param_count(width: int, cfg: ModelConfig, variant: str) -> int:
    if variant == "mamba":
        return _mamba_param_count(width, cfg)
    return 4 * width * width


def count_params(cfg: ModelConfig, variant: str = "mamba") -> int:
    """整个网络的参数个数；attention 版把两个分支里的 Mamba 换成 QKV + 输出投影"""
    if variant not in VARIANTS:
        raise ValueError(f"未知变体 {variant}，可选 {VARIANTS}")
    D, C, K = cfg.embed_dim, cfg.spectral_channels, cfg.class_count
    per_block = 0
    if cfg.branches in ("both", "spa"):
        per_block += _core_param_count(D, cfg, variant) + 2 * D
    if cfg.branches in ("both", "spe"):
        per_block += _core_param_count(cfg.group_width, cfg, variant) + 2 * D
    if cfg.branches == "both" and cfg.fusion != "sum":
        per_block += 2
    return C * D + D + 2 * D + cfg.encoder_depth * per_block + D * K + K
