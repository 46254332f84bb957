"""分类图渲染：类别栅格 -> 二进制 PPM (P6)"""
import io
import os
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from PIL import Image

from services.atomic_file import atomic_write_bytes

RGB = Tuple[int, int, int]

# 22 种可区分颜色
DEFAULT_COLORS: List[RGB] = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
    (255, 255, 255), (100, 60, 160),
]


@dataclass
class Palette:
    """colors[k-1] 是类别 k 的颜色，类别 0 固定为黑色"""
    colors: List[RGB]

    def __post_init__(self):
        for i, c in enumerate(self.colors, start=1):
            if len(c) != 3 or any(not 0 <= int(v) <= 255 for v in c):
                raise ValueError(f"调色板第 {i} 项不是合法 RGB: {c}")
        self.colors = [tuple(int(v) for v in c) for c in self.colors]

    def __len__(self):
        return len(self.colors)

    def lookup_table(self) -> np.ndarray:
        return np.array([(0, 0, 0)] + list(self.colors), dtype=np.uint8).reshape(-1, 3)


def default_palette(class_count: int) -> Palette:
    if class_count > len(DEFAULT_COLORS):
        raise ValueError(f"默认调色板只有 {len(DEFAULT_COLORS)} 种颜色，类别数 {class_count} 请提供调色板文件")
    return Palette(DEFAULT_COLORS[:class_count])


def _parse_color(text: str, lineno: int, path: str) -> RGB:
    if text.startswith('#'):
        if len(text) != 7:
            raise ValueError(f"调色板 {path} 第 {lineno} 行颜色格式错误: {text}")
        return tuple(int(text[i:i + 2], 16) for i in (1, 3, 5))
    parts = text.replace(',', ' ').split()
    if len(parts) != 3:
        raise ValueError(f"调色板 {path} 第 {lineno} 行应为 'R G B' 或 '#RRGGBB': {text}")
    return tuple(int(p) for p in parts)


def load_palette(path: str) -> Palette:
    """每行一个颜色；空行和 # 后跟空格的注释行忽略"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"调色板文件不存在: {path}")
    colors = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            text = raw.strip()
            if not text or text.startswith('# '):
                continue
            colors.append(_parse_color(text, lineno, path))
    return Palette(colors)


def encode_ppm(classes: np.ndarray, palette: Palette) -> bytes:
    classes = np.asarray(classes)
    if classes.ndim != 2:
        raise ValueError(f"分类图应为 H×W，当前 {classes.shape}")
    if classes.size and (classes.min() < 0 or classes.max() > len(palette)):
        raise ValueError(f"类别号 {int(classes.max())} 超出调色板范围 0..{len(palette)}")
    rgb = palette.lookup_table()[classes.astype(np.int64)]
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PPM")
    return buf.getvalue()


def render_map(classes: np.ndarray, palette: Palette, path: str):
    atomic_write_bytes(path, encode_ppm(classes, palette))
