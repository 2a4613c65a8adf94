"""Command-line entry point.

One executable, subcommand per workflow step: dataset generation,
stage-1 training, stage-2 fine-tuning, evaluation, heatmap export,
experiments, hyperparameter sweeps, and the annotation service.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .datagen import GeneratorConfig, generate_dataset, load_manifest
from .trainer import TrainConfig, load_config


def _banner(command: str, config, seed) -> None:
    # reproducibility header: every run echoes its resolved config and seed
    resolved = asdict(config) if hasattr(config, "__dataclass_fields__") else config
    print(f"lae {__version__} :: {command} :: seed={seed}")
    print(json.dumps(resolved, sort_keys=True, default=str))


def _data_root(args) -> Path:
    root = getattr(args, "data", None) or os.environ.get("LAE_DATA_DIR")
    if not root:
        raise SystemExit("no dataset root: pass --data or set LAE_DATA_DIR")
    return Path(root)


def _load_bundle_or_fail(args):
    from .evaluation import load_bundle

    root = _data_root(args)
    try:
        manifest = load_manifest(root)
    except FileNotFoundError as e:
        raise SystemExit(f"manifest not found under {root}: {e}") from e
    return manifest, load_bundle(manifest)


def _train_config(args) -> TrainConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "n_active", None) is not None:
        overrides["n_active"] = args.n_active
    if args.config:
        return load_config(args.config, **overrides)
    return TrainConfig(**overrides)


def cmd_gen_data(args) -> int:
    cfg = GeneratorConfig(size=args.size, train=args.train, val=args.val,
                          test=args.test, unseen=args.unseen, seed=args.seed,
                          out=Path(args.out))
    _banner("gen-data", cfg, args.seed)
    manifest = generate_dataset(cfg)
    counts = manifest.counts()
    for split, c in counts.items():
        print(f"{split}: {c['true']} true + {c['fake']} fake")
    print(f"manifest: {manifest.root / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    from .trainer import save_result, train_stage1

    config = _train_config(args)
    _banner("train", config, config.seed)
    _, bundle = _load_bundle_or_fail(args)
    result = train_stage1(config, bundle.train, bundle.val,
                          log_path=args.log, resume_from=args.resume,
                          last_ckpt_path=args.last_ckpt)
    out = Path(args.out)
    save_result(result, out)
    print(f"best epoch {result.state.best_epoch} "
          f"(val {result.state.best_val:.4f}) -> {out}")
    return 0


def cmd_finetune(args) -> int:
    from .active import (DirectoryMaskProvider, OracleMaskProvider,
                         ServiceMaskProvider)
    from .trainer import TrainResult, load_result, save_result, train_stage2

    stage1 = load_result(args.ckpt)
    config = stage1.config if not args.config else load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.n_active is not None:
        config = replace(config, n_active=args.n_active)
    _banner("finetune", config, config.seed)
    _, bundle = _load_bundle_or_fail(args)

    if args.provider == "oracle":
        provider = OracleMaskProvider(bundle.train.masks)
    elif args.provider == "dir":
        if not args.masks_dir:
            raise SystemExit("--provider dir requires --masks-dir")
        provider = DirectoryMaskProvider(args.masks_dir)
    else:
        if not args.service_url:
            raise SystemExit("--provider service requires --service-url")
        provider = ServiceMaskProvider(args.service_url,
                                       timeout=args.service_timeout)

    result = train_stage2(stage1, bundle.train, bundle.val, provider,
                          config=config, log_path=args.log)
    out = Path(args.out)
    save_result(TrainResult(model=result.model, config=result.config,
                            state=result.state), out)
    print(f"annotated {len(result.annotated_ids)}/{result.candidates.n_active} "
          f"candidates; probe accuracy {result.probe_accuracy:.4f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_report
    from .trainer import load_result

    stage = load_result(args.ckpt)
    _banner("eval", stage.config, stage.config.seed)
    _, bundle = _load_bundle_or_fail(args)
    splits = {"test": bundle.test, "unseen": bundle.unseen}
    if args.split != "all":
        splits = {args.split: getattr(bundle, args.split)}
    report = evaluate_report(stage.model, splits, stage.config,
                             iou_split="unseen" if "unseen" in splits else None)
    print(report.summary())
    if args.report:
        with open(args.report, "w") as f:
            f.write(json.dumps({"split_accuracy": report.split_accuracy,
                                "per_class": report.per_class,
                                "mean_attention_iou": report.mean_attention_iou,
                                "config": report.config_fingerprint,
                                "seed": report.seed}, sort_keys=True) + "\n")
    return 0


def cmd_explain(args) -> int:
    from .evaluation import export_heatmaps
    from .trainer import load_result

    stage = load_result(args.ckpt)
    _banner("explain", stage.config, stage.config.seed)
    _, bundle = _load_bundle_or_fail(args)
    split = getattr(bundle, args.split)
    paths = export_heatmaps(stage.model, split, args.out, limit=args.limit)
    print(f"wrote {len(paths)} heatmap panels to {args.out}")
    return 0


def cmd_experiment(args) -> int:
    from .evaluation import run_ablation_suite, run_selection_comparison

    config = _train_config(args)
    _banner(f"experiment {args.kind}", config, config.seed)
    _, bundle = _load_bundle_or_fail(args)
    seeds = [config.seed + i for i in range(args.seeds)]
    out_dir = Path(args.out)
    if args.kind == "ablation":
        result = run_ablation_suite(bundle, seeds, config, out_dir=out_dir)
        print((out_dir / "ablation.txt").read_text())
    else:
        counts = [int(c) for c in args.counts.split(",")]
        result = run_selection_comparison(bundle, counts, seeds, config,
                                          out_dir=out_dir)
        print((out_dir / "selection.txt").read_text())
    del result
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import run_sweep

    config = _train_config(args)
    _banner(f"sweep {args.param}", config, config.seed)
    _, bundle = _load_bundle_or_fail(args)
    seeds = [config.seed + i for i in range(args.seeds)]
    rows = run_sweep(bundle, args.param, seeds, config, out_dir=args.out)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_serve_annotations(args) -> int:
    from .service import AnnotationService

    try:
        service = AnnotationService(args.candidates, args.images, args.state,
                                    port=args.port, static_dir=args.static)
    except (FileNotFoundError, RuntimeError, OSError) as e:
        raise SystemExit(str(e)) from e
    print(f"annotation service on {service.base_url} "
          f"({service.state.counts()['total']} tasks)")
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        service.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lae", description="locality-aware autoencoder forgery detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic forgery dataset")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=40)
    p.add_argument("--test", type=int, default=40)
    p.add_argument("--unseen", type=int, default=40)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    def add_common(p, config=True):
        p.add_argument("--data", help="dataset root (or LAE_DATA_DIR)")
        if config:
            p.add_argument("--config", help="plain key = value config file")
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="stage-1 representation learning")
    add_common(p)
    p.add_argument("--out", default="stage1.ckpt")
    p.add_argument("--log", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--last-ckpt", dest="last_ckpt", default=None)
    p.set_defaults(func=cmd_train, n_active=None)

    p = sub.add_parser("finetune", help="stage-2 active annotation + fine-tune")
    add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--provider", choices=["oracle", "dir", "service"],
                   default="oracle")
    p.add_argument("--n-active", dest="n_active", type=int, default=None)
    p.add_argument("--masks-dir", dest="masks_dir", default=None)
    p.add_argument("--service-url", dest="service_url", default=None)
    p.add_argument("--service-timeout", dest="service_timeout", type=float,
                   default=300.0)
    p.add_argument("--out", default="stage2.ckpt")
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="accuracy and attention-IoU evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "unseen", "all"],
                   default="all")
    p.add_argument("--report", default=None)
    add_common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="export attention heatmap overlays")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "unseen"],
                   default="unseen")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)
    add_common(p, config=False)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("experiment", help="multi-seed trend experiments")
    p.add_argument("kind", choices=["ablation", "selection"])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--counts", default="0,10,20",
                   help="annotation counts for the selection experiment")
    p.add_argument("--out", default="experiments")
    add_common(p)
    p.set_defaults(func=cmd_experiment, n_active=None)

    p = sub.add_parser("sweep", help="grid sweep over loss weights")
    p.add_argument("--param", choices=["beta", "lambda"], required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", default="experiments")
    add_common(p)
    p.set_defaults(func=cmd_sweep, n_active=None)

    p = sub.add_parser("serve-annotations", help="annotation HTTP service")
    p.add_argument("--candidates", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--state", required=True)
    p.add_argument("--static", default=None,
                   help="directory with the browser client")
    p.set_defaults(func=cmd_serve_annotations)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except SystemExit as e:
        if e.code and not isinstance(e.code, int):
            print(f"error: {e.code}", file=sys.stderr)
            return 1
        return int(e.code or 0)
    except (ValueError, FileNotFoundError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
