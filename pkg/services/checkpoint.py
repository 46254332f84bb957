"""
参数检查点 "MHSW"（全部小端）

    magic "MHSW" | u32 version
    u16 配置字段数，每个字段: u16 名长 + 名 | u8 类型(i/f/s) | 值 (i64 / f64 / u16 长度 + utf-8)
    u32 参数记录数，每条: u16 名长 + 名 | u8 rank | u32 × rank 维度 | float32 数据
"""
import dataclasses
import io
import struct
from typing import Tuple

import numpy as np

from services.atomic_file import atomic_write_bytes
from services.mamba_hsi import MambaHSIParams, ModelConfig, init_params

MAGIC = b"MHSW"
VERSION = 1


def _write_str(buf: io.BytesIO, text: str):
    raw = text.encode('utf-8')
    buf.write(struct.pack('<H', len(raw)))
    buf.write(raw)


def encode_checkpoint(cfg: ModelConfig, params: MambaHSIParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack('<I', VERSION))

    fields = dataclasses.fields(cfg)
    buf.write(struct.pack('<H', len(fields)))
    for f in fields:
        value = getattr(cfg, f.name)
        _write_str(buf, f.name)
        if isinstance(value, bool) or isinstance(value, int):
            buf.write(b'i' + struct.pack('<q', int(value)))
        elif isinstance(value, float):
            buf.write(b'f' + struct.pack('<d', value))
        else:
            buf.write(b's')
            _write_str(buf, str(value))

    named = params.named_parameters()
    buf.write(struct.pack('<I', len(named)))
    for name, p in named:
        _write_str(buf, name)
        buf.write(struct.pack('<B', p.ndim))
        for extent in p.shape:
            buf.write(struct.pack('<I', extent))
        buf.write(np.ascontiguousarray(p.data, dtype='<f4').tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise ValueError(f"检查点 {self.path} 在偏移 {self.offset} 处截断（需要 {size} 字节）")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def string(self) -> str:
        return self.take(self.unpack('<H')).decode('utf-8')


def decode_checkpoint(data: bytes, path: str = "<memory>") -> Tuple[ModelConfig, MambaHSIParams]:
    reader = _Reader(data, path)
    magic = reader.take(4)
    if magic != MAGIC:
        raise ValueError(f"检查点 {path} 魔数错误 (偏移 0): {magic!r}")
    version = reader.unpack('<I')
    if version != VERSION:
        raise ValueError(f"检查点 {path} 版本 {version} 不受支持 (偏移 4)")

    values = {}
    for _ in range(reader.unpack('<H')):
        name = reader.string()
        kind = reader.take(1)
        if kind == b'i':
            values[name] = reader.unpack('<q')
        elif kind == b'f':
            values[name] = reader.unpack('<d')
        elif kind == b's':
            values[name] = reader.string()
        else:
            raise ValueError(f"检查点 {path} 偏移 {reader.offset - 1} 处配置类型未知: {kind!r}")
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"检查点 {path} 含未知配置字段 {sorted(unknown)}")
    cfg = ModelConfig(**values)

    state = {}
    for _ in range(reader.unpack('<I')):
        name = reader.string()
        rank = reader.unpack('<B')
        shape = tuple(reader.unpack('<I') for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(reader.take(4 * count), dtype='<f4').reshape(shape).astype(np.float32)
    if reader.offset != len(data):
        raise ValueError(f"检查点 {path} 在偏移 {reader.offset} 之后有多余数据")

    params = init_params(cfg)
    params.load_state_dict(state)
    return cfg, params


def save_checkpoint(path: str, cfg: ModelConfig, params: MambaHSIParams):
    atomic_write_bytes(path, encode_checkpoint(cfg, params))


def load_checkpoint(path: str) -> Tuple[ModelConfig, MambaHSIParams]:
    with open(path, 'rb') as f:
        data = f.read()
    return decode_checkpoint(data, path)
