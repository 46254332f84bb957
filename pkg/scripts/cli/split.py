"""split: 按类随机划分训练/验证/测试掩码并写回场景"""
from config import config
from scripts.cli import require_file
from scripts.cli.summary import format_table
from services.run_log import log
from services.scene_io import load_scene, save_scene, split_per_class


def register(subparsers):
    defaults = config.get_train_defaults()
    p = subparsers.add_parser("split", help="每类 n_train / n_val 划分样本")
    p.add_argument("--scene", required=True)
    p.add_argument("--n-train", type=int, default=defaults['n_train'])
    p.add_argument("--n-val", type=int, default=defaults['n_val'])
    p.add_argument("--seed", type=int, default=defaults['seed'])
    p.add_argument("--out", default=None, help="缺省时覆盖原场景文件")
    p.set_defaults(handler=run)


def run(args):
    scene = load_scene(require_file(args.scene))
    masks = split_per_class(scene.labels, args.n_train, args.n_val, args.seed)
    scene = scene.with_masks(*masks)
    out = args.out or args.scene
    save_scene(scene, out)
    log("Split", f"n_train={args.n_train} n_val={args.n_val} seed={args.seed}，已写入 {out}")
    print(format_table(scene), flush=True)
