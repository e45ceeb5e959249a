#!/usr/bin/env python3
"""ecgforge command-line entry point.

Subcommands wrap the library modules so that every experiment is a single
reproducible invocation:

- ``ingest``    scan a WFDB data root, emit the selection manifest CSV
- ``synth``     write a synthetic WFDB dataset
- ``train``     train and evaluate one cross-validation fold
- ``crossval``  full preset run -> report CSV
- ``evaluate``  apply a saved ensemble to records
- ``attribute`` SVG + score CSV per record
- ``report``    merge per-fold report CSVs

Every run writes ``run_manifest.cfg`` / ``run_manifest.json`` into its output
directory; ``--config <out>/run_manifest.cfg`` replays the run and warns when the
input data no longer matches the checksum recorded next to it.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from attribution import (
    METHODS,
    AttributionError,
    IgConfig,
    attribute,
    export_scores_csv,
    normalize_channels,
    render_figure,
)
from autodiff import AdamConfig, AutodiffError
from dataset import (
    PRESETS,
    SCHEME_BINARY,
    SCHEME_THREE_CLASS,
    UNKNOWN_MI,
    DatasetError,
    ExperimentPreset,
    RecordEntry,
    assign_folds,
    benchmark_preset,
    entry_from_header,
    export_manifest,
    leakage_audit,
    num_classes,
    summarize_selection,
)
from models import KIND_FCN, KIND_LSTM_FINAL, KIND_LSTM_JOINT, KIND_RESNET, Ensemble, ModelError, ModelSpec, load_model
from models import predict as model_predict
from run_manifest import (
    METADATA_KEYS,
    ManifestError,
    RunManifest,
    atomic_write_text,
    file_checksum,
    load_config_file,
)
from synth_ecg import SynthConfig, SynthError, export_dataset, generate
from training_eval import (
    ConfusionMatrix,
    CrossValReport,
    EvaluationError,
    MetricUndefinedError,
    RecordStore,
    TrainConfig,
    evaluate_records,
    merge_fold_reports,
    predictions_to_csv,
    report_summary,
    report_to_csv,
    train_fold,
)
from training_eval import run_crossval as crossval_report
from wfdb_io import (
    WfdbError,
    load_header,
    load_record,
    record_paths,
    resolve_channel_set,
    scan_database,
    select_channels,
)
from windowing import DOMAIN_FREQUENCY, DOMAIN_TIME, WindowingError, eval_windows

logger = logging.getLogger(__name__)

DATA_ENV = "ECGFORGE_DATA"
DEFAULT_OUT_DIR = "ecgforge_out"
MODEL_KINDS = {"fcn": KIND_FCN, "resnet": KIND_RESNET, "lstm": KIND_LSTM_FINAL, "lstm-joint": KIND_LSTM_JOINT}
DOMAINS = {"time": DOMAIN_TIME, "freq": DOMAIN_FREQUENCY}
CHANNEL_CHOICES = ["all15", "twelve", "eight", "frank", "limb", "I", "II", "III"]
# run-local arguments never written to (or read from) a manifest
NOT_REPLAYED = {"config", "out_dir", "verbose", "command"}

HANDLED_ERRORS = (
    WfdbError,
    DatasetError,
    WindowingError,
    AutodiffError,
    ModelError,
    EvaluationError,
    AttributionError,
    SynthError,
    ManifestError,
    OSError,
    ValueError,
)


class RunResult:
    """Artifacts written by one subcommand plus extra status fields."""

    def __init__(self, out_dir: Path, data_files: Sequence[Path] = ()):
        self.out_dir = out_dir
        self.data_files = list(data_files)
        self.artifacts: List[Path] = []
        self.extra: Dict[str, Any] = {}

    def add(self, *paths: Path) -> None:
        self.artifacts.extend(Path(p) for p in paths)


# ---------------------------------------------------------------------------
# data access


def load_entries(data_root: Optional[str]) -> Tuple[Path, List[RecordEntry], List[Path]]:
    """Labeled entries for every HC/MI record under ``data_root`` plus the files read."""
    if not data_root:
        raise WfdbError(f"No data root given (use --data-root or set {DATA_ENV})")
    root = Path(data_root)
    stems = scan_database(root)
    if not stems:
        raise WfdbError(f"No WFDB records under {root}")
    entries: List[RecordEntry] = []
    files: List[Path] = []
    for stem in stems:
        header = load_header(stem)
        files.extend(record_paths(stem, header))
        entry = entry_from_header(header, stem.parent.name, record_id=f"{stem.parent.name}/{stem.name}")
        if entry is None:
            logger.debug("Skipping %s: diagnosis is neither healthy control nor MI", stem)
            continue
        entries.append(entry)
    logger.info("Loaded %d labeled records from %s", len(entries), root)
    return root, entries, files


def record_loader(root: Path) -> Callable[[str], Any]:
    return lambda record_id: load_record(root / record_id)


def resolve_preset(args: argparse.Namespace) -> Tuple[ExperimentPreset, str]:
    preset = benchmark_preset(args.preset)
    channel_set = args.channels or preset.channel_set
    resolve_channel_set(channel_set)
    return preset, channel_set


def build_spec(args: argparse.Namespace, preset: ExperimentPreset, channel_set: str) -> ModelSpec:
    spec = ModelSpec(
        kind=MODEL_KINDS[args.model],
        input_domain=DOMAINS[args.domain],
        channels=len(resolve_channel_set(channel_set)),
        num_classes=num_classes(preset.label_scheme),
        filters=args.filters,
        activation=args.activation,
    )
    spec.validate()
    return spec


def build_train_config(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        adam=AdamConfig(lr=args.lr),
        ensemble_size=args.ensemble_size,
    )
    cfg.validate()
    return cfg


def load_ensemble(model_dir: str) -> Ensemble:
    stems = sorted(p.with_suffix("") for p in Path(model_dir).glob("member*.ckpt"))
    if not stems:
        raise ModelError(f"No member checkpoints in {model_dir}")
    return Ensemble([load_model(stem) for stem in stems])


def _fold_selection(args: argparse.Namespace, preset: ExperimentPreset, entries: Sequence[RecordEntry]):
    selection = assign_folds(preset.select(entries), args.folds, args.seed)
    leaks = {fold: shared for fold, shared in leakage_audit(selection).items() if shared}
    if leaks:
        raise DatasetError(f"Patients shared between train and test: {leaks}")
    return selection


# ---------------------------------------------------------------------------
# subcommands


def run_ingest(args: argparse.Namespace) -> RunResult:
    preset, _ = resolve_preset(args)
    _, entries, files = load_entries(args.data_root)
    selection = _fold_selection(args, preset, entries)
    result = RunResult(Path(args.out_dir), files)
    result.add(export_manifest(selection, result.out_dir / "selection.csv"))
    summary = summarize_selection(selection)
    result.add(atomic_write_text(result.out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n"))
    result.extra["records"] = len(selection)
    result.extra["patients"] = len(selection.patients)
    return result


def run_synth(args: argparse.Namespace) -> RunResult:
    cfg = SynthConfig(
        num_patients=args.patients,
        records_per_patient=args.records_per_patient,
        sampling_rate=args.sampling_rate,
        duration=args.duration,
        st_offset=args.st_offset,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    result = RunResult(Path(args.out_dir))
    stems = export_dataset(generate(cfg), result.out_dir)
    for stem in stems:
        result.add(*record_paths(stem))
    result.extra["records"] = len(stems)
    return result


def run_train(args: argparse.Namespace) -> RunResult:
    preset, channel_set = resolve_preset(args)
    root, entries, files = load_entries(args.data_root)
    selection = _fold_selection(args, preset, entries)
    if not 0 <= args.fold < selection.k:
        raise ValueError(f"--fold must be in [0, {selection.k}), got {args.fold}")
    spec = build_spec(args, preset, channel_set)
    cfg = build_train_config(args)
    store = RecordStore(record_loader(root), channel_set)
    result = RunResult(Path(args.out_dir), files)
    model_dir = result.out_dir / "models"
    ensemble = train_fold(selection, args.fold, spec, cfg, store, preset, model_dir)
    result.add(*sorted((model_dir / f"fold{args.fold}").glob("member*")))

    test_entries = preset.eval_entries(selection.test_split(args.fold))
    predictions = evaluate_records(ensemble, test_entries, store, cfg, selection.label_scheme, args.fold)
    report = CrossValReport(preset=preset.name, seeds=[cfg.seed + m for m in range(cfg.ensemble_size)])
    report.fold_ids.append(args.fold)
    report.predictions.extend(predictions)
    report.fold_matrices.append(
        ConfusionMatrix.from_decisions([p.is_mi for p in predictions], [p.predicted_mi for p in predictions])
    )
    result.add(
        report_to_csv(report, result.out_dir / f"report_fold{args.fold}.csv"),
        predictions_to_csv(report, result.out_dir / f"predictions_fold{args.fold}.csv"),
    )
    return result


def run_crossval(args: argparse.Namespace) -> RunResult:
    preset, channel_set = resolve_preset(args)
    root, entries, files = load_entries(args.data_root)
    selection = _fold_selection(args, preset, entries)
    spec = build_spec(args, preset, channel_set)
    cfg = build_train_config(args)
    store = RecordStore(record_loader(root), channel_set)
    result = RunResult(Path(args.out_dir), files)
    model_dir = None if args.no_checkpoints else result.out_dir / "models"
    report = crossval_report(preset, spec, cfg, selection, store, model_dir)
    result.add(
        export_manifest(selection, result.out_dir / "selection.csv"),
        report_to_csv(report, result.out_dir / "report.csv"),
        predictions_to_csv(report, result.out_dir / "predictions.csv"),
        atomic_write_text(result.out_dir / "summary.txt", report_summary(report)),
    )
    if model_dir is not None:
        result.add(*sorted(model_dir.glob("fold*/member*")))
    try:
        result.extra["pooled"] = report.pooled_metrics.to_dict()
    except MetricUndefinedError as exc:
        result.extra["pooled"] = str(exc)
    return result


def run_evaluate(args: argparse.Namespace) -> RunResult:
    ensemble = load_ensemble(args.model_dir)
    spec = ensemble.spec
    preset, channel_set = resolve_preset(args)
    if len(resolve_channel_set(channel_set)) != spec.channels:
        raise ValueError(f"Channel set {channel_set!r} does not match the model's {spec.channels} input channels")
    root, entries, files = load_entries(args.data_root)
    scheme = SCHEME_THREE_CLASS if spec.num_classes == 3 else SCHEME_BINARY
    if scheme == SCHEME_THREE_CLASS:
        entries = [e for e in entries if e.group != UNKNOWN_MI]
    if args.record:
        wanted = set(args.record)
        unknown = wanted - {e.record_id for e in entries}
        if unknown:
            raise DatasetError(f"Unknown or unlabeled records: {sorted(unknown)}")
        entries = [e for e in entries if e.record_id in wanted]
    cfg = TrainConfig(seed=args.seed)
    store = RecordStore(record_loader(root), channel_set)
    predictions = evaluate_records(ensemble, entries, store, cfg, scheme)
    report = CrossValReport(preset=preset.name, seeds=[m.init_seed for m in ensemble.members])
    report.predictions.extend(predictions)
    result = RunResult(Path(args.out_dir), files)
    result.add(predictions_to_csv(report, result.out_dir / "predictions.csv"))
    matrix = ConfusionMatrix.from_decisions([p.is_mi for p in predictions], [p.predicted_mi for p in predictions])
    result.extra["confusion"] = {"TP": matrix.TP, "FN": matrix.FN, "TN": matrix.TN, "FP": matrix.FP}
    return result


def _context_scores(scores: np.ndarray, model_leads, context_leads) -> np.ndarray:
    expanded = np.zeros((scores.shape[0], len(context_leads)))
    for column, lead in enumerate(model_leads):
        expanded[:, list(context_leads).index(lead)] = scores[:, column]
    return expanded


def run_attribute(args: argparse.Namespace) -> RunResult:
    ensemble = load_ensemble(args.model_dir)
    if not 0 <= args.member < len(ensemble):
        raise ValueError(f"--member must be in [0, {len(ensemble)}), got {args.member}")
    model = ensemble.members[args.member]
    spec = model.spec
    _, channel_set = resolve_preset(args)
    model_leads = resolve_channel_set(channel_set)
    if len(model_leads) != spec.channels:
        raise ValueError(f"Channel set {channel_set!r} does not match the model's {spec.channels} input channels")
    context_leads = resolve_channel_set(args.context_channels) if args.context_channels else model_leads
    missing = [lead.value for lead in model_leads if lead not in context_leads]
    if missing:
        raise ValueError(f"Context channels lack the model leads {missing}")
    if not args.record:
        raise ValueError("attribute needs at least one --record")
    if not args.data_root:
        raise WfdbError(f"No data root given (use --data-root or set {DATA_ENV})")
    root = Path(args.data_root)
    wcfg = TrainConfig(seed=args.seed).window_config()
    result = RunResult(Path(args.out_dir), [])
    for record_id in args.record:
        stem_path = root / record_id
        raw = load_record(stem_path)
        result.data_files.extend(record_paths(stem_path, raw.header))
        count = args.window_index + 1
        window = eval_windows(select_channels(raw, model_leads), wcfg, args.seed, spec.input_domain, count).data[-1]
        target = args.target_class
        if target is None:
            target = int(np.argmax(model_predict(model, window[None])[0]))
        amap = attribute(model, window, target, args.method, ig_config=IgConfig(steps=args.ig_steps))
        shown = normalize_channels(amap)
        context = eval_windows(select_channels(raw, context_leads), wcfg, args.seed, spec.input_domain, count).data[-1]
        shown = replace(shown, scores=_context_scores(shown.scores, model_leads, context_leads))
        stem = f"{record_id.replace('/', '_')}_{args.method}"
        result.add(
            render_figure(
                context,
                shown,
                [lead.value for lead in context_leads],
                result.out_dir / f"{stem}.svg",
                used_channels=[lead in model_leads for lead in context_leads],
                title=f"{record_id} | {args.method} | class {target}",
            ),
            export_scores_csv(amap, result.out_dir / f"{stem}.csv", [lead.value for lead in model_leads]),
        )
    return result


def run_report(args: argparse.Namespace) -> RunResult:
    result = RunResult(Path(args.out_dir), [Path(p) for p in args.inputs])
    output = Path(args.output) if args.output else result.out_dir / "report.csv"
    result.add(merge_fold_reports(args.inputs, output))
    return result


HANDLERS: Dict[str, Callable[[argparse.Namespace], RunResult]] = {
    "ingest": run_ingest,
    "synth": run_synth,
    "train": run_train,
    "crossval": run_crossval,
    "evaluate": run_evaluate,
    "attribute": run_attribute,
    "report": run_report,
}


# ---------------------------------------------------------------------------
# argument parsing


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-root", default=os.environ.get(DATA_ENV), help=f"WFDB data root (env {DATA_ENV})")
    common.add_argument("--preset", default="table3_default", choices=sorted(PRESETS), help="Experiment preset")
    common.add_argument("--model", default="fcn", choices=sorted(MODEL_KINDS), help="Network architecture")
    common.add_argument("--domain", default="time", choices=sorted(DOMAINS), help="Model input domain")
    common.add_argument("--channels", choices=CHANNEL_CHOICES, help="Channel set (defaults to the preset's)")
    common.add_argument("--seed", type=int, default=0, help="Base seed for folds, windows and initialization")
    common.add_argument("--out-dir", default=DEFAULT_OUT_DIR, help="Output directory owned by this run")
    common.add_argument("--config", help="key = value file with defaults (e.g. a run_manifest.cfg)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    return common


def _add_training_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--folds", type=int, default=10, help="Number of cross-validation folds")
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
    parser.add_argument("--ensemble-size", type=int, default=5)
    parser.add_argument("--filters", type=int, default=128, help="Convolution filters per layer")
    parser.add_argument("--activation", default="elu", choices=["elu", "relu"])


def create_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="ecgforge", description="MI classification from ECG records")
    subparsers = parser.add_subparsers(dest="command", required=True)

    ingest_parser = subparsers.add_parser("ingest", parents=[common], help="Scan data root, emit selection CSV")
    ingest_parser.add_argument("--folds", type=int, default=10, help="Number of cross-validation folds")

    synth_parser = subparsers.add_parser("synth", parents=[common], help="Write a synthetic WFDB dataset")
    synth_parser.add_argument("--patients", type=int, default=40, help="Patients per class")
    synth_parser.add_argument("--records-per-patient", type=int, default=1)
    synth_parser.add_argument("--sampling-rate", type=float, default=1000.0)
    synth_parser.add_argument("--duration", type=float, default=12.0, help="Record length in seconds")
    synth_parser.add_argument("--st-offset", type=float, default=0.2, help="ST offset in mV for MI records")
    synth_parser.add_argument("--noise-std", type=float, default=0.05, help="Gaussian noise std in mV")

    train_parser = subparsers.add_parser("train", parents=[common], help="Train and evaluate a single fold")
    _add_training_args(train_parser)
    train_parser.add_argument("--fold", type=int, required=True, help="Fold index to train")

    crossval_parser = subparsers.add_parser("crossval", parents=[common], help="Full cross-validated preset run")
    _add_training_args(crossval_parser)
    crossval_parser.add_argument("--no-checkpoints", action="store_true", help="Do not keep member checkpoints")

    evaluate_parser = subparsers.add_parser("evaluate", parents=[common], help="Apply a saved ensemble")
    evaluate_parser.add_argument("--model-dir", required=True, help="Directory holding member*.ckpt")
    evaluate_parser.add_argument("--record", nargs="*", default=[], help="Record ids (patient/record); all if omitted")

    attribute_parser = subparsers.add_parser("attribute", parents=[common], help="Attribution SVG + score CSV")
    attribute_parser.add_argument("--model-dir", required=True, help="Directory holding member*.ckpt")
    attribute_parser.add_argument("--record", nargs="+", default=[], help="Record ids (patient/record)")
    attribute_parser.add_argument("--method", default="grad_x_input", choices=list(METHODS))
    attribute_parser.add_argument("--member", type=int, default=0, help="Ensemble member to explain")
    attribute_parser.add_argument("--target-class", type=int, help="Class to explain (default: predicted)")
    attribute_parser.add_argument("--window-index", type=int, default=0, help="Evaluation window to explain")
    attribute_parser.add_argument("--ig-steps", type=int, default=256)
    attribute_parser.add_argument("--context-channels", help="Channel set drawn in the figure (e.g. all15)")

    report_parser = subparsers.add_parser("report", parents=[common], help="Merge per-fold report CSVs")
    report_parser.add_argument("--inputs", nargs="+", required=True, help="Fold report CSVs")
    report_parser.add_argument("--output", help="Merged CSV (default <out-dir>/report.csv)")

    return parser


def _subparsers(parser: argparse.ArgumentParser) -> Dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def _config_defaults(sub: argparse.ArgumentParser, values: Dict[str, str]) -> Dict[str, Any]:
    """Turn config strings into parser defaults; argparse converts plain string defaults itself."""
    actions = {action.dest: action for action in sub._actions}
    defaults: Dict[str, Any] = {}
    for key, text in values.items():
        if key in METADATA_KEYS or key in NOT_REPLAYED:
            continue
        action = actions.get(key)
        if action is None:
            logger.debug("Ignoring config key %s", key)
            continue
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = text.strip().lower() in ("1", "true", "yes")
        elif action.nargs in ("*", "+"):
            defaults[key] = [item.strip() for item in text.split(",") if item.strip()]
        else:
            defaults[key] = text
    return defaults


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` fill in whatever the flags leave unset."""
    argv = list(argv) if argv is not None else sys.argv[1:]
    parser = create_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        values = load_config_file(known.config)
        for sub in _subparsers(parser).values():
            defaults = _config_defaults(sub, values)
            sub.set_defaults(**defaults)
            # required options may come from the file
            for action in sub._actions:
                if action.required and action.dest in defaults:
                    action.required = False
    return parser.parse_args(argv)


def manifest_config(args: argparse.Namespace) -> Dict[str, Any]:
    return {key: value for key, value in sorted(vars(args).items()) if key not in NOT_REPLAYED and value is not None}


def _relative(path: Path, base: Path) -> str:
    try:
        return path.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return path.as_posix()


def replayed_manifest(args: argparse.Namespace) -> Optional[RunManifest]:
    """The manifest a ``--config`` file was written with, when it sits next to one."""
    if not getattr(args, "config", None):
        return None
    try:
        return RunManifest.read(Path(args.config).parent)
    except (ManifestError, ValueError, KeyError):
        return None


def write_manifest(args: argparse.Namespace, result: RunResult, replayed: Optional[RunManifest] = None) -> List[Path]:
    checksum = file_checksum(sorted(set(result.data_files))) if result.data_files else ""
    if replayed is not None and replayed.data_checksum and checksum and replayed.data_checksum != checksum:
        logger.warning(
            "Input data differs from the replayed run: checksum %s, manifest recorded %s",
            checksum,
            replayed.data_checksum,
        )
        result.extra["data_checksum_mismatch"] = {"expected": replayed.data_checksum, "actual": checksum}
    manifest = RunManifest(
        command=args.command,
        config=manifest_config(args),
        data_checksum=checksum,
        outputs=[_relative(p, result.out_dir) for p in result.artifacts],
    )
    return manifest.write(result.out_dir)


def dispatch(args: argparse.Namespace) -> RunResult:
    try:
        handler = HANDLERS[args.command]
    except KeyError as exc:
        raise ValueError(f"Unsupported command: {args.command}") from exc
    replayed = replayed_manifest(args)
    result = handler(args)
    result.add(*write_manifest(args, result, replayed))
    return result


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[Iterable[str]] = None) -> int:
    try:
        args = parse_args(list(argv) if argv is not None else None)
    except ManifestError as exc:
        print(json.dumps({"status": "error", "message": str(exc)}), file=sys.stderr)
        return 1
    _configure_logging(args.verbose)
    try:
        result = dispatch(args)
    except HANDLED_ERRORS as exc:
        logger.debug("%s failed", args.command, exc_info=True)
        print(json.dumps({"status": "error", "command": args.command, "message": str(exc)}), file=sys.stderr)
        return 1
    status = {
        "status": "ok",
        "command": args.command,
        "out_dir": str(result.out_dir),
        "artifacts": [str(p) for p in result.artifacts],
        **result.extra,
    }
    print(json.dumps(status, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
