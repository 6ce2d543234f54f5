"""
Nameplate Inspection Engine

Command-line entry point for automated inspection of laser-engraved
nameplates: synthetic corpus generation, ResVAE training, threshold
tuning, single-plate inspection and corpus benchmarking.

Exit codes: 0 acceptable, 1 defective, 2 defective but unverifiable,
3 operational error (bad input, configuration or I/O).
"""
import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from core.errors import InspectionError
from core.events import Event, EventType, event_bus
from models.config import CorpusConfig, PipelineConfig
from models.training import TrainingConfig
from utils.logging_config import setup_logging, get_logger

EXIT_OPERATIONAL = 3


def _print_stage(event: Event):
    result = event.data
    print(f"  {result.stage.value:<18} {'ok' if result.passed else 'FAILED'}", file=sys.stderr)


def _read_grid(path):
    try:
        grid = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise InspectionError(f"Could not read grid file {path}: {e}") from e
    if not isinstance(grid, dict):
        raise InspectionError(f"Grid file {path} must hold a JSON object")
    return grid


def _rebase(cfg: PipelineConfig, new_dir: Path) -> PipelineConfig:
    """Rewrite relative file references so the config can be saved into new_dir."""
    def move(value):
        if value is None or Path(value).is_absolute():
            return value
        return os.path.relpath(cfg.resolve(value), new_dir)

    cfg.detector.layout_path = move(cfg.detector.layout_path)
    cfg.ocr.atlas_dir = move(cfg.ocr.atlas_dir)
    cfg.models.vae_weights = move(cfg.models.vae_weights)
    cfg.models.perceptual_weights = move(cfg.models.perceptual_weights)
    cfg.base_dir = str(new_dir)
    return cfg


def cmd_generate_data(args) -> int:
    from services.plate_generator import generate_char_corpus, generate_logo_pairs, generate_plate_corpus

    cfg = CorpusConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8"))) if args.config \
        else CorpusConfig()
    cfg.seed = args.seed if args.seed is not None else cfg.seed
    cfg.plates = args.plates if args.plates is not None else cfg.plates
    cfg.defect_rate = args.defect_rate if args.defect_rate is not None else cfg.defect_rate
    cfg.workers = args.workers or cfg.workers
    cfg.validate()

    out = Path(args.out)
    manifest = generate_plate_corpus(cfg, out)
    print(f"Plates: {manifest}")
    print(f"Logo pairs: {generate_logo_pairs(cfg, out)}")
    if not args.skip_chars:
        for split, path in generate_char_corpus(cfg, out).items():
            print(f"Characters ({split}): {path}")
    (out / "corpus.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_train_vae(args) -> int:
    from services.training_service import TrainingService

    cfg = TrainingConfig.load(args.config) if args.config else TrainingConfig()
    if args.epochs:
        cfg.epochs = args.epochs
    if args.preset:
        cfg.preset, cfg.weights, cfg.anneal = args.preset, None, None
    result = TrainingService(cfg).run(args.manifest, args.out, args.val, args.limit)
    last = result.curve[-1]
    print(f"Trained {len(result.curve)} epochs; final loss {last.train_loss:.6f}"
          + (f", validation {last.val_loss:.6f}" if last.val_loss is not None else ""))
    print(f"Weights: {args.out}")
    return 0


def cmd_tune(args) -> int:
    logger = get_logger(__name__)
    val = Path(args.val)
    out = Path(args.out)
    grid = _read_grid(args.grid)
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.load(val / "pipeline.json")

    if args.kind == "logo":
        from services.logo_service import load_logo_samples, tune_area_threshold, write_metrics_table

        area_min, table = tune_area_threshold(load_logo_samples(val / "logos.jsonl"),
                                              grid.get("area_min", []), cfg.logocheck)
        cfg.logocheck.area_min = area_min
        print(f"logocheck.area_min = {area_min}")
    else:
        from services.anomaly_service import (CONSTRAINT_UNMET, grid_search_thresholds, load_char_set, score_batch,
                                              select_threshold_roc)
        from services.logo_service import write_metrics_table
        from services.model_service import load_model

        model = load_model(args.model or cfg.resolve(cfg.models.vae_weights))
        chars, labels = load_char_set(val / "chars" / "val.jsonl", cfg.anomaly, model.input_size)
        tuned, table = grid_search_thresholds(model, (chars, labels), grid, cfg.anomaly)
        threshold, auc, _ = select_threshold_roc(score_batch(model, chars), labels)
        cfg.anomaly = tuned
        cfg.anomaly.traditional_threshold = threshold
        if table.attrs.get("status") == CONSTRAINT_UNMET:
            logger.warning("Anomaly thresholds do not reach recall 1 on the validation set")
            print("warning: no candidate reaches recall 1", file=sys.stderr)
        print(f"anomaly.mask_T = {tuned.mask_T}, anomaly.area_min = {tuned.area_min}, "
              f"MSE threshold = {threshold:.6g} (AUC {auc:.4f})")

    _rebase(cfg, out.parent.resolve()).save(out)
    print(f"Metrics: {write_metrics_table(table, out.with_suffix('.csv'))}")
    print(f"Config: {out}")
    return 0


def cmd_inspect(args) -> int:
    from services.inspection_service import InspectionService, write_annotation, write_report

    cfg = PipelineConfig.load(args.config)
    service = InspectionService(cfg)
    progress = event_bus.subscribed(EventType.STAGE_COMPLETED, _print_stage) if args.verbose else nullcontext()
    with progress:
        report, captured = service.inspect_files(args.captured, args.reference, args.mes, args.serial)

    if args.report:
        write_report(report, args.report)
        if args.timings:
            Path(args.report).with_suffix(".timings.json").write_text(
                json.dumps({k: round(v, 3) for k, v in report.timings_ms.items()}, indent=2) + "\n",
                encoding="utf-8")
    else:
        sys.stdout.write(report.to_json(args.timings))
    if args.overlay:
        write_annotation(report, captured, args.overlay)
    print(f"{report.serial}: {report.verdict.value}"
          + (f" ({report.failed_stage.value})" if report.failed_stage else ""), file=sys.stderr)
    return report.verdict.exit_code


def cmd_evaluate(args) -> int:
    corpus = Path(args.corpus)
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.load(corpus / "pipeline.json")
    report = Path(args.report)

    if args.models:
        from services.evaluation_service import evaluate_characters
        from services.model_service import load_model

        grid = _read_grid(args.grid) if args.grid else {"mask_T": [cfg.anomaly.mask_T],
                                                        "area_min": [cfg.anomaly.area_min]}
        models = {Path(p).stem: load_model(p) for p in args.models}
        table = evaluate_characters(models, corpus / "chars" / "val.jsonl", corpus / "chars" / "test.jsonl",
                                    grid, cfg.anomaly)
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(table.to_json(orient="records", indent=2) + "\n", encoding="utf-8")
        table.to_csv(report.with_suffix(".csv"), index=False)
        print(table.to_string(index=False))
        return 0

    from services.evaluation_service import classification_metrics, run_benchmark, write_benchmark

    result = run_benchmark(corpus / "plates.jsonl", cfg, workers=args.workers, limit=args.limit,
                           show_progress=True)
    json_path, csv_path = write_benchmark(result, report, args.timings)
    metrics = classification_metrics(result.counts)
    print(f"accuracy {metrics['accuracy']:.4f}  precision {metrics['precision']}  "
          f"recall {metrics['recall']}  f1 {metrics['f1']}")
    print(f"Report: {json_path}\nPlates: {csv_path}")
    if not result.ok:
        print(f"{len(result.failures)} plate(s) could not be inspected", file=sys.stderr)
        return EXIT_OPERATIONAL
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nameplate-inspect", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--no-log-file", action="store_true", help="Log to the console only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="Write the synthetic plate, logo and character corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--plates", type=int)
    p.add_argument("--defect-rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="Corpus config JSON")
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--skip-chars", action="store_true", help="Skip the character corpus")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train-vae", help="Train the ResVAE on a character manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="Training config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--val", help="Validation manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--preset", help="Loss-weight preset (model1 .. model6)")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("tune", help="Grid-search logo or anomaly thresholds")
    p.add_argument("--kind", required=True, choices=["logo", "anomaly"])
    p.add_argument("--val", required=True, help="Corpus directory holding the validation data")
    p.add_argument("--grid", required=True, help="JSON object of candidate lists")
    p.add_argument("--out", required=True, help="Tuned pipeline config JSON")
    p.add_argument("--config", help="Base pipeline config (default: <val>/pipeline.json)")
    p.add_argument("--model", help="ResVAE weights (default: the config's)")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("inspect", help="Inspect one captured plate")
    p.add_argument("--captured", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--mes", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--serial", help="MES serial (default: captured file stem)")
    p.add_argument("--report")
    p.add_argument("--overlay")
    p.add_argument("--timings", action="store_true", help="Also emit per-stage timings")
    p.add_argument("--verbose", action="store_true", help="Print stages as they complete")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("evaluate", help="Benchmark the pipeline, or compare character models")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--report", required=True)
    p.add_argument("--timings", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--limit", type=int)
    p.add_argument("--models", nargs="+", help="Evaluate these ResVAE files on the character splits instead")
    p.add_argument("--grid", help="Anomaly grid for --models")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    """Parse arguments, set up logging and dispatch the subcommand."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, log_to_file=not args.no_log_file)
    logger = get_logger(__name__)
    logger.info(f"Running {args.command}")
    try:
        code = args.func(args)
    except (InspectionError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OPERATIONAL
    logger.info(f"{args.command} finished with exit code {code}")
    return code


if __name__ == '__main__':
    sys.exit(main())
