"""train: 整图训练，写检查点和运行清单"""
import dataclasses

from config import config
from scripts.cli import RunManifest, add_model_overrides, model_overrides, positive_int, require_file, sweep_arg
from services.checkpoint import save_checkpoint
from services.mamba_hsi import ModelConfig
from services.metrics import aggregate, evaluate, format_aggregate, format_summary
from services.run_log import log
from services.scene_io import load_scene
from services.trainer import infer, repeat_runs, sweep, sweep_configs, train


def register(subparsers):
    defaults = config.get_train_defaults()
    p = subparsers.add_parser("train", help="训练 MambaHSI")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="检查点路径")
    p.add_argument("--manifest", default=None, help="缺省为 <out>.manifest.json")
    p.add_argument("--runs", type=positive_int, default=1, help="大于 1 时按种子重复划分+训练，报告均值±标准差")
    p.add_argument("--n-train", type=int, default=defaults['n_train'], help="重复实验时每类训练样本数")
    p.add_argument("--n-val", type=int, default=defaults['n_val'], help="重复实验时每类验证样本数")
    p.add_argument("--sweep", type=sweep_arg, default=None, metavar="FIELD=V1,V2",
                   help="超参数扫描，如 spectral_groups=1,2,4,8；每个取值跑 --runs 次，清单里每个取值一行均值±标准差")
    add_model_overrides(p)
    p.set_defaults(handler=run)


def run(args):
    scene = load_scene(require_file(args.scene))
    cfg = ModelConfig.from_config(scene.bands, scene.class_count, **model_overrides(args))
    log("CLI", f"训练配置 {cfg.to_dict()}")
    if args.sweep:
        sweep_configs(cfg, *args.sweep)

    result = train(scene, cfg)
    save_checkpoint(args.out, cfg, result.params)

    manifest = RunManifest(
        config=cfg.to_dict(), seed=cfg.seed, scene_path=args.scene, checkpoint_path=args.out,
        history=[dataclasses.asdict(r) for r in result.history],
        best_epoch=result.best_epoch, best_val_oa=result.best_val_oa,
    )
    if scene.test_mask.any():
        report = evaluate(infer(result.params, scene, cfg), scene.labels, scene.test_mask, class_count=cfg.class_count)
        manifest.final_metrics = report.to_dict()
        print(format_summary(report, "测试集"), flush=True)

    if args.runs > 1:
        seeds = [cfg.seed + i for i in range(args.runs)]
        reports = repeat_runs(scene, cfg, seeds, args.n_train, args.n_val)
        stats = aggregate(reports)
        manifest.repeated = {'seeds': seeds, 'runs': [r.to_dict() for r in reports], 'aggregate': stats}
        print(format_aggregate(stats, len(reports)), flush=True)

    if args.sweep:
        name, values = args.sweep
        seeds = [cfg.seed + i for i in range(args.runs)]
        rows = sweep(scene, cfg, name, values, seeds, args.n_train, args.n_val)
        manifest.sweep = {'param': name, 'seeds': seeds, 'rows': [row.to_dict() for row in rows]}
        for row in rows:
            print(f"{name}={row.value}  {format_aggregate(row.stats, len(row.reports))}", flush=True)

    manifest_path = args.manifest or f"{args.out}.manifest.json"
    manifest.save(manifest_path)
    log("CLI", f"检查点 {args.out}，清单 {manifest_path}")
