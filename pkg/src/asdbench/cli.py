"""Command-line entry point: ``asdbench {ingest,train,stack,hybrid,report,params}``.

Exit codes: 0 ok, 2 dataset error, 3 training failure, 4 report error,
5 parameter-audit breach, 64 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import bench
from .bench import MODEL_NAMES, RunKey, RunStore
from .config import load_config
from .dataset import DatasetError

EXIT_OK, EXIT_DATA, EXIT_TRAIN, EXIT_REPORT, EXIT_AUDIT, EXIT_USAGE = 0, 2, 3, 4, 5, 64


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data-root", help="corpus root: <root>/<class>/*.jpg or <root>/{train,valid,test}/<class>/")
    g.add_argument("--synth", type=int, metavar="N", help="use N synthetic images per class instead of a corpus")
    g.add_argument("--synth-margin", type=float, help="mean-intensity gap between synthetic classes (default 0.3)")
    g.add_argument("--seed", type=int, help="seed for data, splits, initialisation and GBDT (default 0)")


def _run_args(p: argparse.ArgumentParser) -> None:
    _data_args(p)
    g = p.add_argument_group("fine-tuning")
    g.add_argument("--epochs", type=int, help="training epochs (default 30)")
    g.add_argument("--lr", dest="learning_rate", type=float, help="SGD learning rate (default 1e-4)")
    g.add_argument("--batch-size", type=int, help="SGD batch size (default 32)")
    g.add_argument("--micro-batch-size", type=int, help="gradient-accumulation chunk size (default 8)")
    g.add_argument("--momentum", type=float, help="SGD momentum (default 0)")
    g.add_argument("--pretrained", action="store_true", default=None,
                   help="start from ImageNet weights (downloads them); default is seeded random init")
    g.add_argument("--meta-l2", type=float, help="meta-learner L2 strength (default 1.0)")
    g = p.add_argument_group("gradient-boosted trees")
    g.add_argument("--n-trees", type=int, help="boosting rounds (default 100)")
    g.add_argument("--max-depth", type=int, help="tree depth (default 6)")
    g.add_argument("--gbdt-lr", dest="gbdt_learning_rate", type=float, help="shrinkage (default 0.3)")
    g.add_argument("--extractor", choices=("stock", "finetuned"),
                   help="VGG16 feature source: stock base or fine-tuned first (default stock)")
    g = p.add_argument_group("benchmark")
    g.add_argument("--device-index", type=int, help="device number i in D_i (default 1)")
    g.add_argument("--no-accelerator", action="store_true",
                   help=f"hide GPUs from the backend (same as {bench.NO_ACCELERATOR_ENV}=1)")
    g.add_argument("--repeats", type=int, help="timed repetitions per cell, median kept (default 1)")
    g.add_argument("--config", help="JSON config file; command-line flags override it")
    g.add_argument("--out-dir", help="runs directory (default runs/)")


def build_parser() -> Parser:
    parser = Parser(prog="asdbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("ingest", help="ingest a corpus (or synthesise one) and print its manifest summary")
    p.add_argument("root", nargs="?", help="corpus root directory")
    p.add_argument("--synth", type=int, metavar="N", help="generate N synthetic images per class")
    p.add_argument("--synth-margin", type=float, default=0.3, help="synthetic class intensity gap")
    p.add_argument("--seed", type=int, default=0, help="synthetic-data seed")
    p.add_argument("--manifest-out", help="write the manifest JSON here")

    p = sub.add_parser("train", help="train and benchmark one model or all eight")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--model", choices=MODEL_NAMES)
    which.add_argument("--all", action="store_true", help="all eight models")
    _run_args(p)

    p = sub.add_parser("stack", help="train and benchmark the stacked ensemble (60/10/30 split)")
    _run_args(p)
    p = sub.add_parser("hybrid", help="train and benchmark XGBOOST-VGG16")
    _run_args(p)

    p = sub.add_parser("report", help="render result tables or the CPU/accelerator comparison")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--device", type=int, metavar="I", help="table for device I")
    mode.add_argument("--compare", action="store_true", help="D_i' vs D_i comparison")
    p.add_argument("--no-accelerator", action="store_true", help="table for D_I' instead of D_I")
    p.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    p.add_argument("--latest", action="store_true", help="keep the newest record when a model has several")
    p.add_argument("--out", help="write to this file instead of stdout")
    p.add_argument("--out-dir", default="runs", help="runs directory holding records.jsonl")

    p = sub.add_parser("params", help="trainable-parameter audit of the six backbones")
    p.add_argument("--breakdown", action="store_true", help="print per-layer arithmetic")
    return parser


_CONFIG_KEYS = (
    "data_root", "synth", "synth_margin", "seed", "epochs", "learning_rate", "batch_size", "micro_batch_size",
    "momentum", "pretrained", "meta_l2", "n_trees", "max_depth", "gbdt_learning_rate", "extractor",
    "device_index", "repeats", "out_dir",
)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_ingest(args) -> int:
    from .dataset import ingest_directory, synth_dataset

    if (args.root is None) == (args.synth is None):
        print("ingest: give exactly one of ROOT or --synth N", file=sys.stderr)
        return EXIT_USAGE
    try:
        manifest = synth_dataset(args.synth, args.seed, args.synth_margin) if args.synth else ingest_directory(args.root)
    except (DatasetError, ValueError) as exc:
        print(f"ingest: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    counts = manifest.class_counts
    print(f"total: {manifest.total}")
    for name, n in counts.items():
        print(f"{name}: {n}")
    print(f"skipped: {len(manifest.skipped)}")
    print(f"content_hash: {manifest.content_hash}")
    if args.manifest_out:
        Path(args.manifest_out).write_text(manifest.to_json())
    return EXIT_OK


def _run_models(args, names: list[str]) -> int:
    overrides = {k: getattr(args, k, None) for k in _CONFIG_KEYS}
    if args.no_accelerator:
        overrides["accelerator"] = "off"
    try:
        cfg = load_config(args.config, overrides)
    except (ValueError, OSError) as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if cfg.accelerator == "off":
        bench.disable_accelerator()

    from . import pipeline, report

    try:
        manifest = pipeline.load_data(cfg)
    except (DatasetError, ValueError) as exc:
        print(f"data: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    device = bench.detect_device(cfg.device_index)
    runner = pipeline.Runner(cfg, manifest, device)
    print(f"run key {runner.run_key.render()} on {device.cpu_model} (gpu: {device.gpu_model or 'none'}); "
          f"{manifest.total} images; config {cfg.config_hash('all')[:12]}", flush=True)
    code = EXIT_OK
    for name in names:
        try:
            record = runner.run(name)
        except pipeline.TrainingFailed as exc:
            print(f"{name}: training failed: {exc.error!r}", file=sys.stderr)
            code = EXIT_TRAIN
            continue
        except DatasetError as exc:
            print(f"{name}: data: {exc}", file=sys.stderr)
            code = EXIT_DATA
            continue
        row = report.table_rows([record], report.TableSpec(record.run_key))
        line = next(r for r in row if r[0] == report.DISPLAY_NAMES[name])
        print("| " + " | ".join(line) + " |", flush=True)
    return code


def cmd_train(args) -> int:
    return _run_models(args, list(MODEL_NAMES) if args.all else [args.model])


def cmd_report(args) -> int:
    from . import report

    store = RunStore(Path(args.out_dir) / "records.jsonl")
    try:
        records = [r for r in store]
    except bench.StoreCorrupt as exc:
        print(f"report: {exc}", file=sys.stderr)
        return EXIT_REPORT
    if args.compare:
        try:
            _emit(report.render_comparison(records), args.out)
        except report.NoComparablePairs as exc:
            _emit(exc.text, args.out)
            print(f"report: {exc}", file=sys.stderr)
            return EXIT_REPORT
        return EXIT_OK
    key = RunKey(args.device, not args.no_accelerator)
    selected = [r for r in records if r.run_key == key]
    if not selected:
        print(f"report: no records for {key.render()}", file=sys.stderr)
        return EXIT_REPORT
    if args.latest:
        newest = {}
        for r in selected:
            newest[r.model_name] = r
        selected = list(newest.values())
    try:
        _emit(report.render_table(selected, report.TableSpec(key, args.format)), args.out)
    except report.ReportError as exc:
        print(f"report: {exc} (use --latest to keep the newest record per model)", file=sys.stderr)
        return EXIT_REPORT
    return EXIT_OK


def cmd_params(args) -> int:
    bench.disable_accelerator()
    from . import backbones as bb

    rows, breach = [], False
    for bid in bb.CANONICAL_ORDER:
        spec = bb.spec_for(bid)
        model = bb.build_model(spec, pretrained=False, seed=0)
        computed = bb.trainable_param_count(model)
        del model
        sys.modules["keras"].backend.clear_session()
        delta = computed - spec.expected_trainable_params
        rel = delta / spec.expected_trainable_params
        ok = abs(rel) <= spec.param_tolerance
        breach |= not ok
        rows.append((spec, computed, delta, rel, ok))
    print(f"{'backbone':<12} {'computed':>12} {'expected':>12} {'delta':>8} {'rel':>9}  tolerance  status")
    for spec, computed, delta, rel, ok in rows:
        tol = "exact" if spec.param_tolerance == 0 else f"{spec.param_tolerance:.1%}"
        print(f"{spec.id.value:<12} {computed:>12,} {spec.expected_trainable_params:>12,} {delta:>+8,} "
              f"{rel:>+9.4%}  {tol:<9}  {'ok' if ok else 'BREACH'}")
    if args.breakdown:
        for spec, computed, *_ in rows:
            print(f"\n{spec.id.value}: {computed:,} trainable")
            for name, n in bb.param_breakdown(spec):
                print(f"  {name:<32} {n:>12,}")
    return EXIT_AUDIT if breach else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")
    if args.command == "ingest":
        return cmd_ingest(args)
    if args.command == "train":
        return cmd_train(args)
    if args.command == "stack":
        return _run_models(args, ["stacked"])
    if args.command == "hybrid":
        return _run_models(args, ["xgb-vgg16"])
    if args.command == "report":
        return cmd_report(args)
    return cmd_params(args)


if __name__ == "__main__":
    sys.exit(main())
