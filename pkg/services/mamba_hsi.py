"""
MambaHSI 网络（整图、像素级）

数据流（通道在最后一维，batch 固定为 1）：
    image (1, H, W, C)
      -> embed:    SiLU(GN(Conv1x1(I)))                        (1, H, W, D)
      -> encoder:  重复 encoder_depth 次
                     h_spa = SpaMB(h)   整图像素按行优先展平成一条长度 H·W 的序列
                     h_spe = SpeMB(h)   每个像素的 D 维特征切成 G 组，组序列长度 G
                     h     = SSFM(h, h_spa, h_spe) = h + w_spa·h_spa + w_spe·h_spe
      -> seghead:  Conv1x1 D -> K                               (1, H, W, K)

消融变体：branches = both / spa / spe，fusion = ssfm / sum / softmax。
"""
import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from config import config
from services import tensor as T
from services.ssm import (ScanMode, SelectiveSsmParams, default_dt_rank, init_selective_params,
                          mamba_block_forward)
from services.tensor import Tensor

FUSION_MODES = ("ssfm", "sum", "softmax")
BRANCH_MODES = ("both", "spa", "spe")
GN_EPS = 1e-5


# ---------------------------------------------------------------------------
# 配置
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    """模型结构与训练常量。缺省 D=128、G=4、lr=3e-4；N/expand/d_conv 沿用 Mamba 默认值"""
    spectral_channels: int
    class_count: int
    embed_dim: int = 128
    spectral_groups: int = 4
    encoder_depth: int = 1
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    gn_groups: int = 4
    fusion: str = "ssfm"
    branches: str = "both"
    scan_mode: str = "parallel"
    lr: float = 3e-4
    epochs: int = 300
    seed: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("spectral_channels", "embed_dim", "spectral_groups", "encoder_depth",
                     "d_state", "expand", "d_conv", "gn_groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} 必须 ≥ 1，当前 {getattr(self, name)}")
        if self.class_count < 2:
            raise ValueError(f"ModelConfig.class_count 必须 ≥ 2，当前 {self.class_count}")
        if self.embed_dim % self.spectral_groups != 0:
            raise ValueError(f"embed_dim={self.embed_dim} 不能被 spectral_groups={self.spectral_groups} 整除")
        if self.embed_dim % self.gn_groups != 0:
            raise ValueError(f"embed_dim={self.embed_dim} 不能被 gn_groups={self.gn_groups} 整除")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"未知融合方式 {self.fusion}，可选 {FUSION_MODES}")
        if self.branches not in BRANCH_MODES:
            raise ValueError(f"未知分支组合 {self.branches}，可选 {BRANCH_MODES}")
        ScanMode.parse(self.scan_mode)
        if self.epochs < 0:
            raise ValueError(f"epochs 不能为负，当前 {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr 必须为正，当前 {self.lr}")

    @property
    def group_width(self) -> int:
        """M = D / G"""
        return self.embed_dim // self.spectral_groups

    @property
    def mode(self) -> ScanMode:
        return ScanMode.parse(self.scan_mode)

    @classmethod
    def from_config(cls, spectral_channels: int, class_count: int, **overrides) -> "ModelConfig":
        """config.ini 默认值 + 显式覆盖（None 表示不覆盖）"""
        values = dict(config.get_model_defaults())
        train = config.get_train_defaults()
        values.update(lr=train['lr'], epochs=train['epochs'], seed=train['seed'])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(spectral_channels=spectral_channels, class_count=class_count, **values)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# 参数容器
# ---------------------------------------------------------------------------

@dataclass
class GroupNormParams:
    weight: Tensor
    bias: Tensor


@dataclass
class FusionWeights:
    """SSFM 的两个标量融合权重，随机初始化，随反向传播更新，不限符号"""
    w_spa: Tensor
    w_spe: Tensor


@dataclass
class SpaMBParams:
    mamba: SelectiveSsmParams
    norm: GroupNormParams


@dataclass
class SpeMBParams:
    mamba: SelectiveSsmParams
    norm: GroupNormParams


@dataclass
class EncoderBlockParams:
    spa: Optional[SpaMBParams] = None
    spe: Optional[SpeMBParams] = None
    fusion: Optional[FusionWeights] = None


@dataclass
class MambaHSIParams:
    embed_weight: Tensor
    embed_bias: Tensor
    embed_norm: GroupNormParams
    blocks: List[EncoderBlockParams] = field(default_factory=list)
    head_weight: Tensor = None
    head_bias: Tensor = None

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(_walk(self, ""))

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"缺少参数 {name}")
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"参数 {name} 形状 {value.shape} 与模型 {p.shape} 不一致")
            p.data = value.astype(p.dtype).copy()


def _walk(obj, prefix: str) -> Iterator[Tuple[str, Tensor]]:
    """按字段定义顺序展开参数名，如 blocks.0.spa.mamba.in_proj"""
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)


def _param(value, name: str) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float32), requires_grad=True, name=name)


def _init_norm(width: int, name: str) -> GroupNormParams:
    return GroupNormParams(weight=_param(np.ones(width), f"{name}.weight"),
                           bias=_param(np.zeros(width), f"{name}.bias"))


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(fan_in)
    return (_param(rng.uniform(-bound, bound, size=(fan_in, fan_out)), f"{name}.weight"),
            _param(rng.uniform(-bound, bound, size=fan_out), f"{name}.bias"))


def init_params(cfg: ModelConfig, rng: Optional[np.random.Generator] = None) -> MambaHSIParams:
    """按配置初始化全部参数；rng 为空时用 cfg.seed"""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    D = cfg.embed_dim
    embed_w, embed_b = _init_linear(rng, cfg.spectral_channels, D, "embed")

    blocks = []
    for i in range(cfg.encoder_depth):
        prefix = f"blocks.{i}"
        block = EncoderBlockParams()
        if cfg.branches in ("both", "spa"):
            block.spa = SpaMBParams(
                mamba=init_selective_params(D, rng, d_state=cfg.d_state, expand=cfg.expand, d_conv=cfg.d_conv,
                                            dt_rank=default_dt_rank(D), prefix=f"{prefix}.spa.mamba"),
                norm=_init_norm(D, f"{prefix}.spa.norm"))
        if cfg.branches in ("both", "spe"):
            M = cfg.group_width
            block.spe = SpeMBParams(
                mamba=init_selective_params(M, rng, d_state=cfg.d_state, expand=cfg.expand, d_conv=cfg.d_conv,
                                            dt_rank=default_dt_rank(M), prefix=f"{prefix}.spe.mamba"),
                norm=_init_norm(D, f"{prefix}.spe.norm"))
        if cfg.branches == "both" and cfg.fusion != "sum":
            w = rng.uniform(0.0, 1.0, size=2)
            block.fusion = FusionWeights(w_spa=_param(w[0], f"{prefix}.fusion.w_spa"),
                                         w_spe=_param(w[1], f"{prefix}.fusion.w_spe"))
        blocks.append(block)

    head_w, head_b = _init_linear(rng, D, cfg.class_count, "head")
    return MambaHSIParams(embed_weight=embed_w, embed_bias=embed_b,
                          embed_norm=_init_norm(D, "embed_norm"),
                          blocks=blocks, head_weight=head_w, head_bias=head_b)


# ---------------------------------------------------------------------------
# 前向
# ---------------------------------------------------------------------------

def _as_image(image) -> Tensor:
    if isinstance(image, Tensor):
        return image
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


def embed(params: MambaHSIParams, image, cfg: ModelConfig) -> Tensor:
    """逐像素 1x1 卷积 C->D，再 GN、SiLU"""
    image = _as_image(image)
    if image.ndim != 4 or image.shape[-1] != cfg.spectral_channels:
        raise ValueError(f"embed: 输入 {image.shape} 的波段数应为 {cfg.spectral_channels}")
    h = T.conv1x1(image, params.embed_weight, params.embed_bias)
    h = T.group_norm(h, params.embed_norm.weight, params.embed_norm.bias, groups=cfg.gn_groups, eps=GN_EPS)
    return T.silu(h)


def spamb_forward(params: SpaMBParams, h_in: Tensor, cfg: ModelConfig) -> Tensor:
    """空间 Mamba 块：H·W 个像素按行优先（W 最快）展平成一条序列"""
    batch, height, width, dim = h_in.shape
    seq = h_in.reshape(batch, height * width, dim)
    r = mamba_block_forward(params.mamba, seq, mode=cfg.mode)
    r = r.reshape(batch, height, width, dim)
    r = T.silu(T.group_norm(r, params.norm.weight, params.norm.bias, groups=cfg.gn_groups, eps=GN_EPS))
    return r + h_in


def spemb_forward(params: SpeMBParams, h_in: Tensor, cfg: ModelConfig) -> Tensor:
    """光谱 Mamba 块：每个像素的 D 维特征切成 G 个连续组，B·H·W 条长度为 G 的序列共享参数"""
    batch, height, width, dim = h_in.shape
    groups = cfg.spectral_groups
    if dim % groups != 0:
        raise ValueError(f"spemb: 特征维 {dim} 不能被组数 {groups} 整除")
    seq = h_in.reshape(batch * height * width, groups, dim // groups)
    r = mamba_block_forward(params.mamba, seq, mode=cfg.mode)
    r = r.reshape(batch, height, width, dim)
    r = T.silu(T.group_norm(r, params.norm.weight, params.norm.bias, groups=cfg.gn_groups, eps=GN_EPS))
    return r + h_in


def ssfm_fuse(h_in: Tensor, h_spa: Tensor, h_spe: Tensor, w: Optional[FusionWeights],
              mode: str = "ssfm") -> Tensor:
    """H_fus = H_i + w_spa·H_spa + w_spe·H_spe"""
    if not (h_in.shape == h_spa.shape == h_spe.shape):
        raise ValueError(f"ssfm: 形状不一致 {h_in.shape} / {h_spa.shape} / {h_spe.shape}")
    if mode == "sum":
        return h_in + h_spa + h_spe
    if w is None:
        raise ValueError(f"ssfm: 融合方式 {mode} 需要融合权重")
    if mode == "softmax":
        weights = T.softmax(T.concat([w.w_spa.reshape(1), w.w_spe.reshape(1)], axis=0), axis=0)
        return h_in + weights[0] * h_spa + weights[1] * h_spe
    return h_in + w.w_spa * h_spa + w.w_spe * h_spe


def encoder_block_forward(block: EncoderBlockParams, h: Tensor, cfg: ModelConfig) -> Tensor:
    if cfg.branches == "spa":
        return spamb_forward(block.spa, h, cfg)
    if cfg.branches == "spe":
        return spemb_forward(block.spe, h, cfg)
    h_spa = spamb_forward(block.spa, h, cfg)
    h_spe = spemb_forward(block.spe, h, cfg)
    return ssfm_fuse(h, h_spa, h_spe, block.fusion, mode=cfg.fusion)


def encoder_forward(blocks: List[EncoderBlockParams], e: Tensor, cfg: ModelConfig) -> Tensor:
    h = e
    for block in blocks:
        h = encoder_block_forward(block, h, cfg)
    return h


def seghead_forward(params: MambaHSIParams, h: Tensor) -> Tensor:
    """逐像素线性映射 D->K，不接激活"""
    return T.conv1x1(h, params.head_weight, params.head_bias)


def model_forward(params: MambaHSIParams, image, cfg: ModelConfig) -> Tensor:
    """整图一次前向，得到所有像素的 logits (1, H, W, K)"""
    e = embed(params, image, cfg)
    h = encoder_forward(params.blocks, e, cfg)
    return seghead_forward(params, h)


# ---------------------------------------------------------------------------
# 损失与预测
# ---------------------------------------------------------------------------

def masked_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """掩码像素上 -log softmax(logits)[真类] 的均值；掩码外像素对值和梯度都没有贡献"""
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 4 or logits.shape[0] != 1:
        raise ValueError(f"masked_cross_entropy: logits 形状应为 (1, H, W, K)，当前 {logits.shape}")
    if labels.shape != logits.shape[1:3] or mask.shape != labels.shape:
        raise ValueError(f"masked_cross_entropy: 标签 {labels.shape}/掩码 {mask.shape} 与 logits {logits.shape} 不匹配")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("masked_cross_entropy: 掩码为空")
    K = logits.shape[-1]
    picked = labels[mask].astype(np.int64)
    bad = (picked < 1) | (picked > K)
    if np.any(bad):
        rows, cols = np.nonzero(mask)
        i = int(np.argmax(bad))
        raise ValueError(f"masked_cross_entropy: 像素 ({rows[i]}, {cols[i]}) 的标签 {picked[i]} 不在 1..{K}")

    selected = T.mask_select(logits.reshape(logits.shape[1:]), mask)
    logp = T.log_softmax(selected, axis=-1)
    onehot = np.zeros((n, K), dtype=logits.dtype)
    onehot[np.arange(n), picked - 1] = 1
    return -(logp * onehot).sum() / float(n)


def predict(logits) -> np.ndarray:
    """每像素 argmax（等价于 softmax 后 argmax），类别从 1 开始，并列取最小下标"""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim == 4:
        data = data[0]
    return (np.argmax(data, axis=-1) + 1).astype(np.uint16)
