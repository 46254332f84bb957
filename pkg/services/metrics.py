"""
分类评价：混淆矩阵、OA、AA、kappa、逐类精度，以及多次重复实验的均值 ± 标准差
"""
import json
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from services.run_log import warn

SCALARS = ("oa", "aa", "kappa")


@dataclass
class MetricsReport:
    confusion: np.ndarray          # K×K，行 = 真类，列 = 预测
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray          # 掩码中不存在的类为 NaN
    n: int
    absent_classes: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            'oa': self.oa,
            'aa': self.aa,
            'kappa': self.kappa,
            'n': self.n,
            'per_class': [None if np.isnan(v) else float(v) for v in self.per_class],
            'absent_classes': list(self.absent_classes),
            'confusion': self.confusion.astype(int).tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    def to_text(self) -> str:
        """扁平 key = value 文本，每行一项"""
        lines = [f"oa = {self.oa:.6f}", f"aa = {self.aa:.6f}", f"kappa = {self.kappa:.6f}", f"n = {self.n}"]
        for k, acc in enumerate(self.per_class, start=1):
            lines.append(f"class_{k} = {'nan' if np.isnan(acc) else f'{acc:.6f}'}")
        return "\n".join(lines) + "\n"


def report_from_confusion(confusion) -> MetricsReport:
    confusion = np.asarray(confusion, dtype=np.float64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ValueError(f"混淆矩阵应为方阵，当前 {confusion.shape}")
    n = confusion.sum()
    if n <= 0:
        raise ValueError("混淆矩阵为空，无法评价")

    support = confusion.sum(axis=1)
    present = support > 0
    per_class = np.full(confusion.shape[0], np.nan)
    per_class[present] = np.diag(confusion)[present] / support[present]
    absent = [int(k) + 1 for k in np.flatnonzero(~present)]
    if absent:
        warn("Metrics", f"类别 {absent} 在评价掩码中没有像素，AA 不计入这些类")

    p_o = np.trace(confusion) / n
    p_e = float((support * confusion.sum(axis=0)).sum() / (n * n))
    if p_e >= 1.0:
        kappa = 1.0 if p_o >= 1.0 else 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return MetricsReport(confusion=confusion.astype(np.int64), oa=float(p_o), aa=float(per_class[present].mean()),
                         kappa=float(kappa), per_class=per_class, n=int(n), absent_classes=absent)


def evaluate(pred: np.ndarray, labels: np.ndarray, mask: np.ndarray, class_count: int = None) -> MetricsReport:
    """只统计掩码内像素；pred / labels 都是从 1 开始的类别号"""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if not (pred.shape == labels.shape == mask.shape):
        raise ValueError(f"evaluate: 预测 {pred.shape} / 标签 {labels.shape} / 掩码 {mask.shape} 形状不一致")
    if not mask.any():
        raise ValueError("evaluate: 掩码为空")
    K = class_count or int(max(labels.max(), pred[mask].max()))
    t = labels[mask].astype(np.int64) - 1
    p = pred[mask].astype(np.int64) - 1
    if t.min() < 0 or t.max() >= K or p.min() < 0 or p.max() >= K:
        raise ValueError(f"evaluate: 掩码内的类别号超出 1..{K}")
    confusion = np.bincount(t * K + p, minlength=K * K).reshape(K, K)
    return report_from_confusion(confusion)


def overall_accuracy(pred: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """训练循环里每个 epoch 都要算，只求 OA"""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("overall_accuracy: 掩码为空")
    return float((np.asarray(pred)[mask] == np.asarray(labels)[mask]).sum() / n)


def aggregate(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, float]]:
    """每个标量的均值与样本标准差（n-1）；只有一次时标准差为 0"""
    if not reports:
        raise ValueError("aggregate: 报告列表为空")
    out = {}
    for name in SCALARS:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        out[name] = {'mean': float(values.mean()), 'std': std}
    return out


def format_summary(report: MetricsReport, title: str = "") -> str:
    head = f"{title} " if title else ""
    lines = [f"{head}OA {report.oa * 100:.2f}%  AA {report.aa * 100:.2f}%  Kappa {report.kappa:.4f}  (n={report.n})"]
    for k, acc in enumerate(report.per_class, start=1):
        lines.append(f"  类别 {k:>2}: {'  -   ' if np.isnan(acc) else f'{acc * 100:6.2f}%'}")
    return "\n".join(lines)


def format_aggregate(stats: Dict[str, Dict[str, float]], runs: int) -> str:
    return (f"{runs} 次运行  OA {stats['oa']['mean'] * 100:.2f}±{stats['oa']['std'] * 100:.2f}  "
            f"AA {stats['aa']['mean'] * 100:.2f}±{stats['aa']['std'] * 100:.2f}  "
            f"Kappa {stats['kappa']['mean'] * 100:.2f}±{stats['kappa']['std'] * 100:.2f}")
