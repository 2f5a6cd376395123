"""Command-line entry points.

Verbs: train, craft-uap, craft-classwise, evaluate, report, run-matrix.
Every verb takes --config (YAML experiment file) and optional --seed /
--output-dir overrides. Exit codes: 0 success, 1 validation error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .attacks import (
    DEFAULT_EPSILON,
    craft_classwise_uaps,
    craft_uap,
    load_perturbation,
    load_perturbation_set,
    save_perturbation,
    save_perturbation_set,
)
from .errors import ConfigError, DataFormatError, UatforgeError
from .evaluation import (
    assemble_report,
    evaluate_clean,
    evaluate_under_classwise_uap,
    evaluate_under_uap,
    export_perturbation_image,
    measure_under_classwise,
    measure_under_uap,
)
from .experiment import (
    cfg_craft_config,
    cfg_train_config,
    load_config,
    load_datasets,
    run_experiment,
)
from .models import ModelSpec, build_model, load_checkpoint, save_checkpoint
from .reporting import emit_csv, emit_svg_bars, load_report, save_report
from .training import train

_EPILOG = (
    "defaults: epsilon = 8/255 (%.6f) in [0,1] pixel units, linf norm; "
    "craft = 2000 ADAM iterations at lr 0.01; pgd = 7 steps at 2.5*eps/steps."
    % DEFAULT_EPSILON
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--seed", type=int, default=None, help="override experiment.seed")
    p.add_argument("--output-dir", default=None, help="override experiment.output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uatforge", epilog=_EPILOG,
                                     description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"uatforge {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run-matrix", epilog=_EPILOG,
                       help="train every configured regime, evaluate, and report")
    _add_common(p)

    p = sub.add_parser("train", epilog=_EPILOG, help="train one regime (train.regime)")
    _add_common(p)
    p.add_argument("--regime", default=None, help="override train.regime")

    p = sub.add_parser("craft-uap", epilog=_EPILOG,
                       help="craft a single universal perturbation against a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("craft-classwise", epilog=_EPILOG,
                       help="craft one universal perturbation per class against a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("evaluate", epilog=_EPILOG,
                       help="evaluate a checkpoint: clean, UAP, class-wise UAP")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--uap", default=None, help="reuse a stored perturbation instead of crafting")
    p.add_argument("--uap-set", default=None, help="reuse a stored class-wise set instead of crafting")

    p = sub.add_parser("report", epilog=_EPILOG,
                       help="regenerate comparison table and figures from stored report JSONs")
    _add_common(p)
    p.add_argument("--inputs", nargs="+", required=True, help="EvalReport JSON files")
    return parser


def _outdir(cfg) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


def _cmd_train(cfg, args) -> None:
    train_ds, _ = load_datasets(cfg)
    regime = args.regime or cfg.train_args.get("regime", "standard")
    tc = cfg_train_config(cfg, regime)
    spec = ModelSpec(cfg.architecture, train_ds.image_shape, train_ds.num_classes, cfg.model_seed)
    model = build_model(spec)
    result = train(model, train_ds, tc)
    outdir = _outdir(cfg)
    save_checkpoint(result[0], outdir / f"{regime}.ckpt",
                    meta={"epochs": tc.epochs, "config_hash": cfg.config_hash, "regime": regime})
    result[1].to_csv(outdir / f"{regime}_train_log.csv")
    if regime == "uat":
        save_perturbation(result[2], outdir / "uat_perturbation.uap")
    elif regime == "classwise_uat":
        save_perturbation_set(result[2], outdir / "classwise_uat_perturbations.uapset")
    print(f"trained {regime}: {outdir / (regime + '.ckpt')}")


def _cmd_craft(cfg, args, classwise: bool) -> None:
    train_ds, _ = load_datasets(cfg)
    model, _ = load_checkpoint(args.checkpoint)
    craft_cfg = cfg_craft_config(cfg, cfg.seed)
    outdir = _outdir(cfg)
    stem = Path(args.checkpoint).stem
    if classwise:
        pset = craft_classwise_uaps(model, train_ds, cfg.budget, craft_cfg)
        out = outdir / f"{stem}_classwise.uapset"
        save_perturbation_set(pset, out)
        for c in range(pset.num_classes):
            ext = "pgm" if train_ds.image_shape[0] == 1 else "ppm"
            export_perturbation_image(pset[c], outdir / f"{stem}_class{c}.{ext}", cfg.amplification)
    else:
        pert = craft_uap(model, train_ds, cfg.budget, craft_cfg)
        out = outdir / f"{stem}.uap"
        save_perturbation(pert, out)
        ext = "pgm" if train_ds.image_shape[0] == 1 else "ppm"
        export_perturbation_image(pert, outdir / f"{stem}_uap.{ext}", cfg.amplification)
    print(f"crafted: {out}")


def _cmd_evaluate(cfg, args) -> None:
    train_ds, val_ds = load_datasets(cfg)
    model, meta = load_checkpoint(args.checkpoint)
    regime = meta.get("regime", "standard")
    craft_cfg = cfg_craft_config(cfg, cfg.seed)
    outdir = _outdir(cfg)
    stem = Path(args.checkpoint).stem
    if args.uap:
        clean, per_clean = evaluate_clean(model, val_ds)
        robust, per_robust = measure_under_uap(model, val_ds, load_perturbation(args.uap))
        report = assemble_report(model, val_ds, "uap", cfg.budget.epsilon, None,
                                 clean, per_clean, robust, per_robust, regime)
    else:
        report, _ = evaluate_under_uap(model, train_ds, val_ds, cfg.budget, craft_cfg, regime)
    emit_csv([report], outdir / f"eval_{stem}.csv")
    if args.uap_set:
        robust, _ = measure_under_classwise(model, val_ds, load_perturbation_set(args.uap_set))
        print(f"class-wise diagnostic accuracy: {robust:.1f}")
    else:
        cw_report, _ = evaluate_under_classwise_uap(model, train_ds, val_ds, cfg.budget,
                                                    craft_cfg, regime)
        save_report(cw_report, outdir / f"eval_{stem}_classwise.json")
    print(f"clean {report.clean_accuracy:.1f} | uap {report.uap_accuracy:.1f} "
          f"-> {outdir / f'eval_{stem}.csv'}")


def _cmd_report(cfg, args) -> None:
    reports = [load_report(p) for p in args.inputs]
    outdir = _outdir(cfg)
    emit_csv(reports, outdir / "comparison.csv")
    vectors = [r.per_class_uap for r in reports]
    labels = [r.regime for r in reports]
    emit_svg_bars(vectors, labels, outdir / "comparison.svg",
                  title="per-class accuracy under UAP")
    print(f"wrote {outdir / 'comparison.csv'} and {outdir / 'comparison.svg'}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.output_dir)
        if args.verb == "run-matrix":
            manifest = run_experiment(cfg)
            print(f"run complete: {cfg.output_dir / 'manifest.json'} "
                  f"({len(manifest.artifacts)} artifacts)")
        elif args.verb == "train":
            _cmd_train(cfg, args)
        elif args.verb == "craft-uap":
            _cmd_craft(cfg, args, classwise=False)
        elif args.verb == "craft-classwise":
            _cmd_craft(cfg, args, classwise=True)
        elif args.verb == "evaluate":
            _cmd_evaluate(cfg, args)
        elif args.verb == "report":
            _cmd_report(cfg, args)
    except (ConfigError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except UatforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
