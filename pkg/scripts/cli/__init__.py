"""命令行公共部分：退出码、参数解析器、模型配置覆盖、运行清单"""
import argparse
import dataclasses
import json
import os
import traceback
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from services.atomic_file import atomic_write_text
from services.mamba_hsi import ModelConfig
from services.run_log import log

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# spectral_channels / class_count 来自场景，不作为覆盖项
_NOT_OVERRIDABLE = {"spectral_channels", "class_count"}


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """用法错误抛异常而不是直接 exit(2)，由 main 统一转成退出码 1；子命令解析器同样只认完整长参数"""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"文件不存在: {path}")
    return path


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"需要正整数: {text}")
    return value


def size_list(text: str) -> List[int]:
    sizes = [positive_int(part) for part in text.split(',') if part.strip()]
    if not sizes:
        raise argparse.ArgumentTypeError("尺寸列表为空")
    return sizes


def sweep_arg(text: str) -> Tuple[str, List[int]]:
    """--sweep spectral_groups=1,2,4,8 -> ("spectral_groups", [1, 2, 4, 8])"""
    name, sep, values = text.partition("=")
    if not sep or not name.strip():
        raise argparse.ArgumentTypeError(f"扫描格式应为 字段=取值1,取值2: {text}")
    return name.strip().replace("-", "_"), size_list(values)


def add_model_overrides(parser: argparse.ArgumentParser):
    """每个 ModelConfig 字段一个 --flag（下划线换成连字符），缺省 None 表示取 config.ini"""
    group = parser.add_argument_group("模型配置覆盖")
    for f in dataclasses.fields(ModelConfig):
        if f.name in _NOT_OVERRIDABLE:
            continue
        kind = f.type if isinstance(f.type, type) else {'int': int, 'float': float}.get(str(f.type), str)
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None)


def model_overrides(args: argparse.Namespace) -> dict:
    names = {f.name for f in dataclasses.fields(ModelConfig)} - _NOT_OVERRIDABLE
    return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}


@dataclass
class RunManifest:
    """一次训练的可复现记录，不含时间戳"""
    config: dict
    seed: int
    scene_path: str
    checkpoint_path: str
    history: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_oa: Optional[float] = None
    final_metrics: Optional[dict] = None
    repeated: Optional[dict] = None
    sweep: Optional[dict] = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), ensure_ascii=False, indent=2, sort_keys=True)

    def save(self, path: str):
        atomic_write_text(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(require_file(path), 'r', encoding='utf-8') as f:
            return cls(**json.load(f))


def dispatch(handler, args: argparse.Namespace) -> int:
    """执行子命令并把异常映射成退出码"""
    try:
        handler(args)
        return EXIT_OK
    except FloatingPointError as e:
        log("CLI", f"数值错误: {e}")
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError, KeyError, OSError) as e:
        log("CLI", f"数据错误: {e}")
        if os.getenv("MAMBAHSI_TRACEBACK"):
            traceback.print_exc()
        return EXIT_DATA
