"""summary: 打印场景的逐类样本表"""
from scripts.cli import require_file
from services.scene_io import HsiScene, load_scene, scene_summary


def format_table(scene: HsiScene) -> str:
    lines = [f"场景 {scene.height}×{scene.width}×{scene.bands}，{scene.class_count} 类",
             f"{'类别':>4} {'训练':>8} {'验证':>8} {'测试':>8} {'总数':>8}"]
    totals = {'train': 0, 'val': 0, 'test': 0, 'total': 0}
    for row in scene_summary(scene):
        lines.append(f"{row['class']:>6} {row['train']:>10} {row['val']:>10} {row['test']:>10} {row['total']:>10}")
        for key in totals:
            totals[key] += row[key]
    lines.append(f"{'合计':>4} {totals['train']:>10} {totals['val']:>10} {totals['test']:>10} {totals['total']:>10}")
    return "\n".join(lines)


def register(subparsers):
    p = subparsers.add_parser("summary", help="打印场景逐类样本数")
    p.add_argument("--scene", required=True)
    p.set_defaults(handler=run)


def run(args):
    print(format_table(load_scene(require_file(args.scene))), flush=True)
