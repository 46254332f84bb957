"""
高光谱场景容器 "HSC1"、按类划分训练/验证/测试、合成场景、原始数据导入

HSC1 布局（小端）:
    magic "HSC1" | u32 H | u32 W | u32 C | u32 K
    float32 立方体 H×W×C（行优先，波段最快）
    u16 标签 H×W（0 = 未标注，1..K = 类别）
    u8 train / val / test 掩码各 H×W（0/1）
"""
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from services.atomic_file import atomic_write_bytes
from services.run_log import log, warn

MAGIC = b"HSC1"
HEADER = struct.Struct('<4sIIII')
MAX_SYNTH_CLASSES = 8


@dataclass
class HsiScene:
    cube: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray = None
    val_mask: np.ndarray = None
    test_mask: np.ndarray = None

    def __post_init__(self):
        self.cube = np.asarray(self.cube, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        empty = np.zeros(self.labels.shape, dtype=bool)
        self.train_mask = empty.copy() if self.train_mask is None else np.asarray(self.train_mask, dtype=bool)
        self.val_mask = empty.copy() if self.val_mask is None else np.asarray(self.val_mask, dtype=bool)
        self.test_mask = empty.copy() if self.test_mask is None else np.asarray(self.test_mask, dtype=bool)

    @property
    def height(self) -> int:
        return self.cube.shape[0]

    @property
    def width(self) -> int:
        return self.cube.shape[1]

    @property
    def bands(self) -> int:
        return self.cube.shape[2]

    @property
    def class_count(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def mask(self, which: str) -> np.ndarray:
        if which not in ("train", "val", "test"):
            raise ValueError(f"未知掩码 {which}，可选 train / val / test")
        return getattr(self, f"{which}_mask")

    def with_masks(self, train: np.ndarray, val: np.ndarray, test: np.ndarray) -> "HsiScene":
        return HsiScene(self.cube, self.labels, train, val, test)

    def validate(self):
        if self.cube.ndim != 3:
            raise ValueError(f"立方体应为 H×W×C，当前 {self.cube.shape}")
        if self.labels.shape != self.cube.shape[:2]:
            raise ValueError(f"标签 {self.labels.shape} 与立方体 {self.cube.shape} 尺寸不一致")
        labeled = self.labels > 0
        masks = (("train", self.train_mask), ("val", self.val_mask), ("test", self.test_mask))
        for name, m in masks:
            if m.shape != self.labels.shape:
                raise ValueError(f"{name} 掩码形状 {m.shape} 与标签 {self.labels.shape} 不一致")
            outside = m & ~labeled
            if outside.any():
                r, c = np.argwhere(outside)[0]
                raise ValueError(f"{name} 掩码在未标注像素 ({r}, {c}) 上被置位")
        overlap = (self.train_mask.astype(np.int8) + self.val_mask + self.test_mask) > 1
        if overlap.any():
            r, c = np.argwhere(overlap)[0]
            raise ValueError(f"掩码在像素 ({r}, {c}) 上相互重叠")


# ---------------------------------------------------------------------------
# 读写
# ---------------------------------------------------------------------------

def encode_scene(scene: HsiScene) -> bytes:
    scene.validate()
    H, W, C = scene.cube.shape
    parts = [
        HEADER.pack(MAGIC, H, W, C, scene.class_count),
        np.ascontiguousarray(scene.cube, dtype='<f4').tobytes(),
        np.ascontiguousarray(scene.labels, dtype='<u2').tobytes(),
    ]
    for m in (scene.train_mask, scene.val_mask, scene.test_mask):
        parts.append(np.ascontiguousarray(m, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_scene(data: bytes, path: str = "<memory>") -> HsiScene:
    if len(data) < HEADER.size:
        raise ValueError(f"场景文件 {path} 截断: 偏移 0 处需要 {HEADER.size} 字节文件头，实际 {len(data)}")
    magic, H, W, C, K = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"场景文件 {path} 魔数错误 (偏移 0): {magic!r}")
    pixels = H * W
    sections = [("cube", 4 * pixels * C), ("labels", 2 * pixels),
                ("train_mask", pixels), ("val_mask", pixels), ("test_mask", pixels)]
    offsets = {}
    offset = HEADER.size
    for name, size in sections:
        if offset + size > len(data):
            raise ValueError(f"场景文件 {path} 截断: {name} 段从偏移 {offset} 起需要 {size} 字节，"
                             f"文件只有 {len(data)} 字节")
        offsets[name] = offset
        offset += size
    if offset != len(data):
        raise ValueError(f"场景文件 {path} 在偏移 {offset} 之后有多余数据")

    cube = np.frombuffer(data, dtype='<f4', count=pixels * C, offset=offsets["cube"]).reshape(H, W, C)
    labels = np.frombuffer(data, dtype='<u2', count=pixels, offset=offsets["labels"]).reshape(H, W)
    masks = {}
    for name in ("train_mask", "val_mask", "test_mask"):
        raw = np.frombuffer(data, dtype=np.uint8, count=pixels, offset=offsets[name])
        bad = raw > 1
        if bad.any():
            raise ValueError(f"场景文件 {path} 偏移 {offsets[name] + int(np.argmax(bad))} 处掩码值不是 0/1")
        outside = (raw == 1) & (labels.reshape(-1) == 0)
        if outside.any():
            raise ValueError(f"场景文件 {path} 偏移 {offsets[name] + int(np.argmax(outside))} 处 "
                             f"{name} 落在未标注像素上")
        masks[name] = raw.reshape(H, W).astype(bool)
    overlap = (masks["train_mask"].astype(np.int8) + masks["val_mask"] + masks["test_mask"]) > 1
    if overlap.any():
        i = int(np.argmax(overlap.reshape(-1)))
        raise ValueError(f"场景文件 {path} 偏移 {offsets['val_mask'] + i} 处掩码相互重叠")
    actual_k = int(labels.max()) if labels.size else 0
    if actual_k != K:
        raise ValueError(f"场景文件 {path} 偏移 16 处类别数 K={K} 与标签最大值 {actual_k} 不符")

    return HsiScene(cube.copy(), labels.copy(), masks["train_mask"], masks["val_mask"], masks["test_mask"])


def save_scene(scene: HsiScene, path: str):
    atomic_write_bytes(path, encode_scene(scene))


def load_scene(path: str) -> HsiScene:
    with open(path, 'rb') as f:
        data = f.read()
    return decode_scene(data, path)


def import_raw(cube_path: str, labels_path: str, height: int, width: int, bands: int) -> HsiScene:
    """float32 BIP 立方体 + u16 标签栅格 -> HsiScene（掩码为空）"""
    cube = np.fromfile(cube_path, dtype='<f4')
    if cube.size != height * width * bands:
        raise ValueError(f"立方体 {cube_path} 有 {cube.size} 个 float32，期望 {height}×{width}×{bands}")
    labels = np.fromfile(labels_path, dtype='<u2')
    if labels.size != height * width:
        raise ValueError(f"标签 {labels_path} 有 {labels.size} 个 u16，期望 {height}×{width}")
    scene = HsiScene(cube.reshape(height, width, bands), labels.reshape(height, width))
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# 按类划分
# ---------------------------------------------------------------------------

class Xorshift64Star:
    """
    xorshift64* 伪随机数发生器，种子经 splitmix64 打散（种子 0 也可用）。
    只用于样本划分，保证划分结果与平台、numpy 版本无关。
    """
    _MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        z = (int(seed) + 0x9E3779B97F4A7C15) & self._MASK
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self._MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self._MASK
        z ^= z >> 31
        self.state = z or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & self._MASK
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & self._MASK

    def below(self, n: int) -> int:
        """[0, n) 上的整数（取高 32 位做乘法映射）"""
        return ((self.next_u64() >> 32) * n) >> 32

    def shuffle(self, items: np.ndarray) -> np.ndarray:
        """Fisher-Yates 洗牌，返回新数组"""
        out = np.array(items, copy=True)
        for i in range(len(out) - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


def split_per_class(labels: np.ndarray, n_train: int, n_val: int, seed: int
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    每类随机取 n_train 个训练、n_val 个验证像素，其余为测试（无放回，按种子复现）。
    某类像素不足 n_train + n_val + 1 时，留 1 个给测试，其余按比例分给训练/验证并告警。
    """
    labels = np.asarray(labels)
    if n_train < 0 or n_val < 0:
        raise ValueError(f"n_train / n_val 不能为负: {n_train} / {n_val}")
    K = int(labels.max()) if labels.size else 0
    train = np.zeros(labels.shape, dtype=bool)
    val = np.zeros(labels.shape, dtype=bool)
    test = np.zeros(labels.shape, dtype=bool)
    rng = Xorshift64Star(seed)
    flat_train, flat_val, flat_test = train.reshape(-1), val.reshape(-1), test.reshape(-1)
    flat_labels = labels.reshape(-1)

    for k in range(1, K + 1):
        idx = np.flatnonzero(flat_labels == k)
        count = idx.size
        if count == 0:
            raise ValueError(f"类别 {k} 没有任何像素，无法划分")
        t, v = n_train, n_val
        if count < n_train + n_val + 1:
            available = count - 1
            t = available * n_train // (n_train + n_val)
            v = available - t
            warn("Split", f"类别 {k} 只有 {count} 个像素，按比例划分为 训练 {t} / 验证 {v} / 测试 {count - t - v}")
        order = rng.shuffle(idx)
        flat_train[order[:t]] = True
        flat_val[order[t:t + v]] = True
        flat_test[order[t + v:]] = True
    return train, val, test


def scene_summary(scene: HsiScene) -> List[Dict[str, int]]:
    """每类 训练/验证/测试/总数，对应数据集表格"""
    rows = []
    for k in range(1, scene.class_count + 1):
        cls = scene.labels == k
        rows.append({
            'class': k,
            'train': int((cls & scene.train_mask).sum()),
            'val': int((cls & scene.val_mask).sum()),
            'test': int((cls & scene.test_mask).sum()),
            'total': int(cls.sum()),
        })
    return rows


# ---------------------------------------------------------------------------
# 合成场景
# ---------------------------------------------------------------------------

def class_spectrum(class_index: int, bands: int, class_count: int) -> np.ndarray:
    """零基类别 j 的光谱：中心在波段 ⌊j·C/K⌋ 的高斯鼓包，宽度 C/(2K)"""
    center = (class_index * bands) // class_count
    width = max(1.0, bands / (2.0 * class_count))
    b = np.arange(bands, dtype=np.float64)
    return np.exp(-0.5 * ((b - center) / width) ** 2)


def _voronoi_sites(height: int, width: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """K 个互不相同的站点，尽量满足最小间距，保证每个 Voronoi 单元不至于太小"""
    min_dist = 0.5 * np.sqrt(height * width / count)
    best = None
    for _ in range(1000):
        flat = rng.choice(height * width, size=count, replace=False)
        sites = np.stack([flat // width, flat % width], axis=1).astype(np.float64)
        d = np.sqrt(((sites[:, None] - sites[None]) ** 2).sum(-1))
        gap = d[np.triu_indices(count, 1)].min() if count > 1 else np.inf
        if best is None or gap > best[0]:
            best = (gap, sites)
        if gap >= min_dist:
            break
    return best[1]


def synth_scene(height: int, width: int, bands: int, class_count: int, noise_sigma: float,
                seed: int) -> HsiScene:
    """
    K 个站点的 Voronoi 单元作为连通的类别区域，类别光谱为平滑鼓包加高斯噪声。
    标签稠密（每个像素都有类别），掩码为空，需再调用 split_per_class。
    """
    if class_count > MAX_SYNTH_CLASSES:
        raise ValueError(f"合成场景最多 {MAX_SYNTH_CLASSES} 类，当前 {class_count}")
    if class_count < 1 or bands < class_count:
        raise ValueError(f"合成场景需要 1 ≤ K ≤ C，当前 K={class_count}, C={bands}")
    if height < 1 or width < 1 or height * width < class_count:
        raise ValueError(f"图像 {height}×{width} 放不下 {class_count} 个类别")
    if noise_sigma < 0:
        raise ValueError(f"噪声标准差不能为负: {noise_sigma}")

    rng = np.random.default_rng(seed)
    sites = _voronoi_sites(height, width, class_count, rng)
    rows, cols = np.mgrid[0:height, 0:width]
    d2 = (rows[..., None] - sites[:, 0]) ** 2 + (cols[..., None] - sites[:, 1]) ** 2
    labels = (np.argmin(d2, axis=-1) + 1).astype(np.uint16)

    spectra = np.stack([class_spectrum(j, bands, class_count) for j in range(class_count)])
    cube = spectra[labels - 1]
    if noise_sigma > 0:
        cube = cube + rng.normal(0.0, noise_sigma, size=cube.shape)
    log("SceneIO", f"合成场景 {height}×{width}×{bands}，{class_count} 类，σ={noise_sigma}，seed={seed}")
    return HsiScene(cube.astype(np.float32), labels)
