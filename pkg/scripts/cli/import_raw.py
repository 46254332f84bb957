"""import: float32 BIP 立方体 + u16 标签栅格 -> HSC1"""
from scripts.cli import positive_int, require_file
from services.run_log import log
from services.scene_io import import_raw, save_scene


def register(subparsers):
    p = subparsers.add_parser("import", help="导入原始 BIP 立方体和标签")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--h", dest="height", type=positive_int, required=True)
    p.add_argument("--w", dest="width", type=positive_int, required=True)
    p.add_argument("--c", dest="bands", type=positive_int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=run)


def run(args):
    scene = import_raw(require_file(args.cube), require_file(args.labels), args.height, args.width, args.bands)
    save_scene(scene, args.out)
    log("SceneIO", f"导入 {args.height}×{args.width}×{args.bands}，{scene.class_count} 类 -> {args.out}")
