"""eval: 在指定掩码上评价检查点"""
from scripts.cli import require_file
from services.atomic_file import atomic_write_text
from services.checkpoint import load_checkpoint
from services.metrics import evaluate, format_summary
from services.scene_io import load_scene
from services.trainer import infer


def register(subparsers):
    p = subparsers.add_parser("eval", help="计算 OA / AA / Kappa")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", default=None, help="文本报告路径，缺省为 <checkpoint>.<mask>.txt；同名 .json 一并写出")
    p.set_defaults(handler=run)


def run(args):
    scene = load_scene(require_file(args.scene))
    cfg, params = load_checkpoint(require_file(args.checkpoint))
    mask = scene.mask(args.mask)
    report = evaluate(infer(params, scene, cfg), scene.labels, mask, class_count=cfg.class_count)

    out = args.out or f"{args.checkpoint}.{args.mask}.txt"
    atomic_write_text(out, report.to_text())
    stem = out[:-4] if out.endswith(".txt") else out
    atomic_write_text(f"{stem}.json", report.to_json() + "\n")
    print(format_summary(report, args.mask), flush=True)
