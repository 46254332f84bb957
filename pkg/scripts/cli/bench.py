"""bench: 编码块 FLOPs 模型 + 实测耗时，输出 CSV"""
from scripts.cli import add_model_overrides, model_overrides, positive_int, size_list
from services.bench import bench_forward, write_csv
from services.flop_model import VARIANTS
from services.mamba_hsi import ModelConfig
from services.run_log import log

# 编码块基准与输入波段数、类别数无关
_BENCH_BANDS = 1
_BENCH_CLASSES = 2


def register(subparsers):
    p = subparsers.add_parser("bench", help="Mamba 与自注意力的复杂度对比")
    p.add_argument("--sizes", type=size_list, required=True, help="边长列表，如 25,50,100,200")
    p.add_argument("--variant", choices=VARIANTS, default="mamba")
    p.add_argument("--out", required=True, help="CSV 路径")
    p.add_argument("--repeats", type=positive_int, default=None)
    p.add_argument("--attention-cap", type=positive_int, default=None)
    add_model_overrides(p)
    p.set_defaults(handler=run)


def run(args):
    cfg = ModelConfig.from_config(_BENCH_BANDS, _BENCH_CLASSES, **model_overrides(args))
    rows = bench_forward(args.sizes, cfg, args.variant, repeats=args.repeats, attention_cap=args.attention_cap)
    write_csv(rows, args.out)
    log("CLI", f"{len(rows)} 行 -> {args.out}")
