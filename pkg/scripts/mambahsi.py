#!/usr/bin/env python3
"""
MambaHSI 命令行
  用法: python scripts/mambahsi.py synth   --h 32 --w 32 --c 16 --k 3 --sigma 0.05 --seed 1 --out s.hsc
        python scripts/mambahsi.py split   --scene s.hsc [--n-train 30 --n-val 10 --seed 1]
        python scripts/mambahsi.py train   --scene s.hsc --out m.mhsw [--epochs 300 --fusion ssfm --runs 5 --sweep spectral_groups=1,2,4]
        python scripts/mambahsi.py eval    --scene s.hsc --checkpoint m.mhsw --mask test
        python scripts/mambahsi.py predict --scene s.hsc --checkpoint m.mhsw --out map.ppm
        python scripts/mambahsi.py bench   --sizes 25,50,100,200 --variant mamba --out bench.csv
        python scripts/mambahsi.py import  --cube cube.f32 --labels gt.u16 --h 610 --w 340 --c 103 --out pu.hsc
        python scripts/mambahsi.py summary --scene s.hsc
  退出码: 0 成功，1 用法错误，2 数据错误，3 数值错误
"""
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from dotenv import load_dotenv
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
load_dotenv(os.path.join(PROJECT_ROOT, '.env'), override=True)

from scripts.cli import EXIT_USAGE, CliParser, UsageError, dispatch
from scripts.cli import bench, evaluate, import_raw, predict, split, summary, synth, train
from services import tensor as T

COMMANDS = (synth, split, train, evaluate, predict, bench, import_raw, summary)


def build_parser() -> CliParser:
    parser = CliParser(prog="mambahsi", description="MambaHSI 高光谱整图分类")
    parser.add_argument("--debug-nan", action="store_true", help="任一算子产生 NaN/Inf 时立即报错")
    subparsers = parser.add_subparsers(dest="command", metavar="<command>")
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("缺少子命令")
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"用法错误: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.debug_nan:
        T.set_debug_nan(True)
    return dispatch(args.handler, args)


if __name__ == "__main__":
    sys.exit(main())
