"""synth: 生成合成场景（HSC1）"""
from scripts.cli import positive_int
from services.run_log import log
from services.scene_io import save_scene, synth_scene


def register(subparsers):
    p = subparsers.add_parser("synth", help="生成合成高光谱场景")
    p.add_argument("--h", dest="height", type=positive_int, required=True)
    p.add_argument("--w", dest="width", type=positive_int, required=True)
    p.add_argument("--c", dest="bands", type=positive_int, required=True)
    p.add_argument("--k", dest="classes", type=positive_int, required=True)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=run)


def run(args):
    scene = synth_scene(args.height, args.width, args.bands, args.classes, args.sigma, args.seed)
    save_scene(scene, args.out)
    log("CLI", f"合成场景已写入 {args.out}")
