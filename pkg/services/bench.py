"""
编码块前向基准：实测耗时（中位数）+ 解析 FLOPs

mamba 版走真实的 SpaMB/SpeMB 前向；self_attention 版把两个分支中的 Mamba 换成
单头 QKV softmax 注意力（只在这里使用）。权重随机，输入为随机嵌入。
"""
import csv
import io
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import config
from services import tensor as T
from services.atomic_file import atomic_write_text
from services.flop_model import VARIANTS, count_params, flops_encoder_block
from services.mamba_hsi import GN_EPS, ModelConfig, encoder_block_forward, init_params, ssfm_fuse
from services.run_log import log, warn
from services.tensor import Tensor

CSV_HEADER = ["variant", "H", "W", "L", "gflops_model", "seconds"]


@dataclass
class BenchRow:
    variant: str
    height: int
    width: int
    gflops_model: float
    seconds: Optional[float] = None

    @property
    def length(self) -> int:
        return self.height * self.width

    @property
    def skipped(self) -> bool:
        return self.seconds is None


def init_attention_weights(width: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(width)
    return {name: rng.uniform(-bound, bound, size=(width, width)).astype(np.float32)
            for name in ("wq", "wk", "wv", "wo")}


def attention_forward(x: np.ndarray, weights: Dict[str, np.ndarray]) -> np.ndarray:
    """x (B, L, d) -> (B, L, d)，单头缩放点积注意力"""
    q = x @ weights['wq']
    k = x @ weights['wk']
    v = x @ weights['wv']
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(x.shape[-1])
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    return (attn @ v) @ weights['wo']


def _attention_block_forward(h: np.ndarray, block, attn: Dict[str, Dict[str, np.ndarray]],
                             cfg: ModelConfig) -> Tensor:
    batch, height, width, dim = h.shape
    h_in = Tensor(h)

    def tail(core: np.ndarray, norm) -> Tensor:
        r = Tensor(core.reshape(batch, height, width, dim))
        return T.silu(T.group_norm(r, norm.weight, norm.bias, groups=cfg.gn_groups, eps=GN_EPS)) + h_in

    outputs = {}
    if block.spa is not None:
        core = attention_forward(h.reshape(batch, height * width, dim), attn['spa'])
        outputs['spa'] = tail(core, block.spa.norm)
    if block.spe is not None:
        groups = cfg.spectral_groups
        core = attention_forward(h.reshape(batch * height * width, groups, dim // groups), attn['spe'])
        outputs['spe'] = tail(core, block.spe.norm)
    if cfg.branches != "both":
        return outputs[cfg.branches]
    return ssfm_fuse(h_in, outputs['spa'], outputs['spe'], block.fusion, mode=cfg.fusion)


def _median_seconds(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def bench_forward(sizes: Sequence[int], cfg: ModelConfig, variant: str = "mamba",
                  repeats: Optional[int] = None, attention_cap: Optional[int] = None) -> List[BenchRow]:
    """每个边长 s 测一次 s×s 图像上一个编码块的前向"""
    if variant not in VARIANTS:
        raise ValueError(f"未知变体 {variant}，可选 {VARIANTS}")
    if not sizes:
        raise ValueError("尺寸列表为空")
    bench_cfg = config.get_bench_defaults()
    repeats = repeats or bench_cfg['repeats']
    attention_cap = attention_cap or bench_cfg['attention_cap']
    # 无梯度时顺序扫描走流式路径，不保存隐藏状态
    cfg = cfg.replace(encoder_depth=1, scan_mode="sequential")

    rng = np.random.default_rng(cfg.seed)
    block = init_params(cfg, rng).blocks[0]
    attn = {'spa': init_attention_weights(cfg.embed_dim, rng),
            'spe': init_attention_weights(cfg.group_width, rng)}
    log("Bench", f"{variant}: 参数量 {count_params(cfg, variant)}，尺寸 {list(sizes)}，重复 {repeats} 次")

    rows = []
    for s in sizes:
        if s < 1:
            raise ValueError(f"尺寸必须为正: {s}")
        gflops = flops_encoder_block(s, s, cfg, variant)
        if variant == "self_attention" and s > attention_cap:
            warn("Bench", f"{s}×{s} 超过注意力上限 {attention_cap}，跳过实测")
            rows.append(BenchRow(variant, s, s, gflops))
            continue
        h = rng.standard_normal((1, s, s, cfg.embed_dim)).astype(np.float32)

        def run():
            with T.no_grad():
                if variant == "mamba":
                    return encoder_block_forward(block, Tensor(h), cfg)
                return _attention_block_forward(h, block, attn, cfg)

        seconds = _median_seconds(run, repeats)
        rows.append(BenchRow(variant, s, s, gflops, seconds))
        log("Bench", f"{variant} {s}×{s} L={s * s} 模型 {gflops:.4f} GFLOPs 实测 {seconds:.4f}s")
    return rows


def rows_to_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r.variant, r.height, r.width, r.length, f"{r.gflops_model:.6f}",
                         "skipped" if r.skipped else f"{r.seconds:.6f}"])
    return buf.getvalue()


def write_csv(rows: Sequence[BenchRow], path: str):
    atomic_write_text(path, rows_to_csv(rows))
