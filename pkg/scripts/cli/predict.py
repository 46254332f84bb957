"""predict: 整图一次前向，渲染分类图（PPM）"""
from scripts.cli import require_file
from services.checkpoint import load_checkpoint
from services.map_renderer import default_palette, load_palette, render_map
from services.run_log import log
from services.scene_io import load_scene
from services.trainer import infer


def register(subparsers):
    p = subparsers.add_parser("predict", help="输出分类图")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="PPM 路径")
    p.add_argument("--palette", default=None, help="调色板文件，每行 'R G B' 或 '#RRGGBB'")
    p.add_argument("--mask-unlabeled", action="store_true", help="未标注像素画成黑色")
    p.set_defaults(handler=run)


def run(args):
    scene = load_scene(require_file(args.scene))
    cfg, params = load_checkpoint(require_file(args.checkpoint))
    palette = load_palette(args.palette) if args.palette else default_palette(cfg.class_count)
    classes = infer(params, scene, cfg)
    if args.mask_unlabeled:
        classes[scene.labels == 0] = 0
    render_map(classes, palette, args.out)
    log("CLI", f"分类图 {scene.height}×{scene.width} -> {args.out}")
