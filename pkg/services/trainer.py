"""
整图训练循环

每个 epoch：整图前向 -> 训练掩码上的交叉熵 -> 反向 -> Adam。
验证 OA 取自同一次前向（即本次更新前的参数），保留验证 OA 最高的那组参数；
循环结束后再对最终参数评一次，以免最后一次更新被漏掉。
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from services import tensor as T
from services.mamba_hsi import (MambaHSIParams, ModelConfig, init_params, masked_cross_entropy, model_forward,
                                predict)
from services.metrics import MetricsReport, aggregate, evaluate, overall_accuracy
from services.optim import AdamState, adam_step
from services.run_log import log, warn
from services.scene_io import HsiScene, split_per_class

LOG_EVERY = 10


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_oa: float


@dataclass
class TrainResult:
    params: MambaHSIParams
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_oa: Optional[float] = None


def check_scene(cfg: ModelConfig, scene: HsiScene):
    """模型配置与场景是否匹配：波段数一致，类别数够用"""
    if scene.bands != cfg.spectral_channels:
        raise ValueError(f"模型期望 {cfg.spectral_channels} 个波段，场景有 {scene.bands} 个")
    if scene.class_count > cfg.class_count:
        raise ValueError(f"场景有 {scene.class_count} 类，超过模型的 {cfg.class_count} 类")


def infer(params: MambaHSIParams, scene: HsiScene, cfg: ModelConfig) -> np.ndarray:
    """整图一次前向得到所有像素的类别"""
    check_scene(cfg, scene)
    with T.no_grad():
        logits = model_forward(params, scene.cube, cfg)
    return predict(logits)


def train(scene: HsiScene, cfg: ModelConfig, log_name: str = "train") -> TrainResult:
    check_scene(cfg, scene)
    scene.validate()
    if not scene.train_mask.any() and cfg.epochs > 0:
        raise ValueError("训练掩码为空，请先划分样本")

    params = init_params(cfg)
    result = TrainResult(params=params)
    if cfg.epochs == 0:
        return result

    select_mask = scene.val_mask if scene.val_mask.any() else scene.train_mask
    if not scene.val_mask.any():
        warn("Train", "验证掩码为空，按训练集 OA 选择最佳参数", name=log_name)

    state = AdamState(lr=cfg.lr)
    plist = params.parameters()
    image = scene.cube[None]
    best_state = params.state_dict()
    best_oa = -1.0

    for epoch in range(1, cfg.epochs + 1):
        logits = model_forward(params, image, cfg)
        loss = masked_cross_entropy(logits, scene.labels, scene.train_mask)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise FloatingPointError(f"第 {epoch} 个 epoch 损失发散: {loss_value}")

        val_oa = overall_accuracy(predict(logits), scene.labels, select_mask)
        if val_oa > best_oa:
            best_oa, result.best_epoch = val_oa, epoch - 1
            best_state = params.state_dict()

        params.zero_grad()
        loss.backward()
        adam_step(plist, state)
        result.history.append(EpochRecord(epoch=epoch, train_loss=loss_value, val_oa=val_oa))
        if epoch == 1 or epoch % LOG_EVERY == 0 or epoch == cfg.epochs:
            log("Train", f"epoch {epoch}/{cfg.epochs} loss={loss_value:.6f} val_oa={val_oa:.4f}", name=log_name)

    final_oa = overall_accuracy(infer(params, scene, cfg), scene.labels, select_mask)
    if final_oa > best_oa:
        best_oa, result.best_epoch = final_oa, cfg.epochs
    else:
        params.load_state_dict(best_state)
    result.best_val_oa = best_oa
    log("Train", f"完成，最佳参数来自第 {result.best_epoch} 次更新后，val_oa={best_oa:.4f}", name=log_name)
    return result


def repeat_runs(scene: HsiScene, cfg: ModelConfig, seeds: Sequence[int], n_train: int, n_val: int,
                log_name: str = "train") -> List[MetricsReport]:
    """每个种子重新划分样本并重新训练，返回测试集上的评价，用于 aggregate"""
    reports = []
    for seed in seeds:
        train_mask, val_mask, test_mask = split_per_class(scene.labels, n_train, n_val, seed)
        run_scene = scene.with_masks(train_mask, val_mask, test_mask)
        run_cfg = cfg.replace(seed=seed)
        log("Train", f"重复实验 seed={seed}", name=log_name)
        result = train(run_scene, run_cfg, log_name=log_name)
        pred = infer(result.params, run_scene, run_cfg)
        reports.append(evaluate(pred, run_scene.labels, run_scene.test_mask, class_count=cfg.class_count))
    return reports


# 可扫描的结构超参数（整数字段）
SWEEPABLE = ("spectral_groups", "embed_dim", "d_state", "encoder_depth", "gn_groups", "expand", "d_conv")


def sweep_configs(cfg: ModelConfig, name: str, values: Sequence[int]) -> List[ModelConfig]:
    """每个扫描取值对应的配置；字段不可扫描或取值使配置非法时报 ValueError"""
    if name not in SWEEPABLE:
        raise ValueError(f"不支持扫描 {name}，可选 {SWEEPABLE}")
    if not values:
        raise ValueError(f"扫描 {name} 的取值列表为空")
    return [cfg.replace(**{name: int(v)}) for v in values]


@dataclass
class SweepRow:
    value: int
    stats: Dict[str, Dict[str, float]]
    reports: List[MetricsReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {'value': self.value, 'aggregate': self.stats, 'runs': [r.to_dict() for r in self.reports]}


def sweep(scene: HsiScene, cfg: ModelConfig, name: str, values: Sequence[int], seeds: Sequence[int],
          n_train: int, n_val: int, log_name: str = "train") -> List[SweepRow]:
    """
    超参数扫描（如 G、D）：每个取值跑一组 repeat_runs，聚合成均值±标准差一行。
    所有取值先做配置校验，非法取值在训练开始前报错。
    """
    configs = sweep_configs(cfg, name, values)
    rows = []
    for value, run_cfg in zip(values, configs):
        log("Train", f"扫描 {name}={value}，{len(seeds)} 次运行", name=log_name)
        reports = repeat_runs(scene, run_cfg, seeds, n_train, n_val, log_name=log_name)
        rows.append(SweepRow(value=int(value), stats=aggregate(reports), reports=reports))
    return rows
