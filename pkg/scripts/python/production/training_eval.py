"""Fold training, record-level evaluation, metrics and cross-validation reports.

Features:
- Ensemble training per fold (member seeds ``seed + m``) on windows drawn per epoch
  with the 2:1 healthy-control oversampling plan
- Leakage guard: training code only sees a record store restricted to the fold's
  training records
- Record decisions from the mean ensemble softmax over seeded evaluation windows
- Sensitivity / specificity / precision / Youden's J, pooled and per fold
- CSV report, text summary, threshold sweep and fold-report merging
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from autodiff import (
    DEFAULT_CLIP_NORM,
    AdamConfig,
    Tensor,
    adam_step,
    clip_gradients,
    crossentropy_loss,
    mse_loss,
    no_grad,
)
from dataset import (
    SCHEME_THREE_CLASS,
    DatasetSelection,
    ExperimentPreset,
    LeakageError,
    RecordEntry,
    class_index,
    make_sampling_plan,
    num_classes,
)
from models import (
    KIND_LSTM_JOINT,
    LSTM_KINDS,
    Ensemble,
    ModelSpec,
    TrainedModel,
    build_model,
    ensemble_predict,
    save_model,
)
from run_manifest import atomic_write_text, derive_seed
from windowing import WindowConfig, eval_windows, make_model_input
from wfdb_io import SignalRecord, select_channels

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["fold", "TP", "FN", "TN", "FP", "sens", "spec", "prec", "J"]
POOLED_ROW = "pooled"
DECISION_THRESHOLD = 0.5
DEFAULT_SWEEP = tuple(np.round(np.linspace(0.1, 0.9, 9), 2))


class EvaluationError(RuntimeError):
    pass


class DataError(EvaluationError):
    pass


class MetricUndefinedError(EvaluationError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    train_windows_per_record_per_epoch: int = 8
    eval_windows_per_record: int = 32
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)
    clip_norm: float = DEFAULT_CLIP_NORM
    ensemble_size: int = 5
    window_seconds: float = 4.0
    target_length: int = 192

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_size", "train_windows_per_record_per_epoch", "eval_windows_per_record", "ensemble_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")

    def window_config(self) -> WindowConfig:
        return WindowConfig(
            window_seconds=self.window_seconds,
            target_length=self.target_length,
            eval_windows_per_record=self.eval_windows_per_record,
            train_windows_per_record_per_epoch=self.train_windows_per_record_per_epoch,
            rng_seed=self.seed,
        )


class RecordStore:
    """Channel-selected records by record id, optionally restricted to an allowed set."""

    def __init__(
        self,
        loader: Union[Mapping[str, SignalRecord], Callable[[str], SignalRecord]],
        channel_set: Optional[str] = None,
        allowed: Optional[Iterable[str]] = None,
    ):
        self._loader = loader
        self._channel_set = channel_set
        self._allowed = None if allowed is None else frozenset(allowed)
        self._cache: Dict[str, SignalRecord] = {}

    def __contains__(self, record_id: str) -> bool:
        return self._allowed is None or record_id in self._allowed

    def __getitem__(self, record_id: str) -> SignalRecord:
        if record_id not in self:
            raise LeakageError(f"Record {record_id} is not accessible from this split")
        if record_id not in self._cache:
            source = self._loader
            record = source[record_id] if isinstance(source, Mapping) else source(record_id)
            if self._channel_set is not None:
                record = select_channels(record, self._channel_set)
            self._cache[record_id] = record
        return self._cache[record_id]

    def restrict(self, record_ids: Iterable[str]) -> "RecordStore":
        ids = frozenset(record_ids)
        if self._allowed is not None and not ids <= self._allowed:
            raise LeakageError(f"Cannot widen a restricted store with {sorted(ids - self._allowed)}")
        view = RecordStore(self._loader, self._channel_set, ids)
        view._cache = self._cache
        return view


@dataclass(frozen=True)
class ConfusionMatrix:
    TP: int = 0
    FN: int = 0
    TN: int = 0
    FP: int = 0

    def __post_init__(self):
        if min(self.TP, self.FN, self.TN, self.FP) < 0:
            raise ValueError(f"Confusion counts must be non-negative: {self}")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.TP + other.TP, self.FN + other.FN, self.TN + other.TN, self.FP + other.FP)

    @property
    def positives(self) -> int:
        return self.TP + self.FN

    @property
    def negatives(self) -> int:
        return self.TN + self.FP

    @classmethod
    def from_decisions(cls, truth: Sequence[bool], predicted: Sequence[bool]) -> "ConfusionMatrix":
        t = np.asarray(truth, dtype=bool)
        p = np.asarray(predicted, dtype=bool)
        return cls(
            TP=int(np.sum(t & p)),
            FN=int(np.sum(t & ~p)),
            TN=int(np.sum(~t & ~p)),
            FP=int(np.sum(~t & p)),
        )


@dataclass(frozen=True)
class Metrics:
    sensitivity: float
    specificity: float
    precision: float
    youden_j: float

    def to_dict(self) -> Dict[str, float]:
        return {"sens": self.sensitivity, "spec": self.specificity, "prec": self.precision, "J": self.youden_j}


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    if cm.positives == 0 or cm.negatives == 0:
        raise MetricUndefinedError(f"Metrics need positive and negative records, got {cm}")
    sens = cm.TP / cm.positives
    spec = cm.TN / cm.negatives
    prec = cm.TP / (cm.TP + cm.FP) if cm.TP + cm.FP > 0 else float("nan")
    return Metrics(sensitivity=sens, specificity=spec, precision=prec, youden_j=sens + spec - 1.0)


@dataclass
class RecordPrediction:
    record_id: str
    fold: int
    true_class: int
    probabilities: np.ndarray
    predicted_class: int

    @property
    def is_mi(self) -> bool:
        return self.true_class != 0

    @property
    def predicted_mi(self) -> bool:
        return self.predicted_class != 0

    @property
    def mi_score(self) -> float:
        """Probability mass on the MI classes."""
        return float(1.0 - self.probabilities[0])


@dataclass
class CrossValReport:
    preset: str
    seeds: List[int]
    fold_ids: List[int] = field(default_factory=list)
    fold_matrices: List[ConfusionMatrix] = field(default_factory=list)
    predictions: List[RecordPrediction] = field(default_factory=list)
    class_confusion: Optional[np.ndarray] = None

    @property
    def fold_metrics(self) -> List[Optional[Metrics]]:
        out: List[Optional[Metrics]] = []
        for cm in self.fold_matrices:
            try:
                out.append(compute_metrics(cm))
            except MetricUndefinedError:
                out.append(None)
        return out

    @property
    def pooled_matrix(self) -> ConfusionMatrix:
        total = ConfusionMatrix()
        for cm in self.fold_matrices:
            total = total + cm
        return total

    @property
    def pooled_metrics(self) -> Metrics:
        return compute_metrics(self.pooled_matrix)

    def mean_fold_metrics(self) -> Dict[str, float]:
        defined = [m.to_dict() for m in self.fold_metrics if m is not None]
        if not defined:
            return {}
        return {key: float(np.nanmean([d[key] for d in defined])) for key in defined[0]}


def _batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    # batch normalization needs >= 2 examples
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def draw_epoch(
    schedule: Sequence[str],
    labels: Mapping[str, int],
    store: RecordStore,
    wcfg: WindowConfig,
    rng: np.random.Generator,
    domain: str,
) -> Tuple[np.ndarray, np.ndarray]:
    """``train_windows_per_record_per_epoch`` random windows for every scheduled record."""
    windows, targets = [], []
    for record_id in schedule:
        record = store[record_id]
        for _ in range(wcfg.train_windows_per_record_per_epoch):
            window, _ = make_model_input(record, wcfg, rng, domain)
            windows.append(window)
            targets.append(labels[record_id])
    return np.stack(windows), np.asarray(targets, dtype=np.int64)


def _batch_losses(model: TrainedModel, xb: np.ndarray, yb: np.ndarray, mode: str, rng=None):
    joint = model.spec.kind == KIND_LSTM_JOINT
    out = model.forward(Tensor(xb), mode=mode, rng=rng, return_prediction=joint)
    logits, prediction = out if joint else (out, None)
    class_loss = crossentropy_loss(logits, yb)
    pred_loss = mse_loss(prediction, xb[:, 1:, :]) if joint else None
    return class_loss, pred_loss


def train_member(
    spec: ModelSpec,
    entries: Sequence[RecordEntry],
    store: RecordStore,
    cfg: TrainConfig,
    label_scheme: str,
    member_seed: int,
    stream_key: Tuple = (),
) -> TrainedModel:
    """Train one model; ``entries`` must all be readable from ``store``."""
    wcfg = cfg.window_config()
    model = build_model(spec, seed=member_seed)
    rng = np.random.default_rng(derive_seed(member_seed, "train", *stream_key))
    labels = {e.record_id: class_index(e, label_scheme) for e in entries}
    plan = make_sampling_plan(entries)
    schedule = plan.schedule(sorted(labels))
    joint = spec.kind == KIND_LSTM_JOINT
    log: Dict[str, List[float]] = {"class_loss": []}
    lam = 0.0
    if joint:
        log.update({"pred_loss": [], "lambda": [], "initial_pred_loss": []})
    for epoch in range(cfg.epochs):
        x, y = draw_epoch(schedule, labels, store, wcfg, rng, spec.input_domain)
        order = rng.permutation(len(y))
        if joint and epoch == 0:
            first = order[: cfg.batch_size]
            with no_grad():
                c0, p0 = _batch_losses(model, x[first], y[first], "eval")
            lam = c0.item() / max(p0.item(), 1e-12)
            log["initial_pred_loss"].append(p0.item())
        class_sum, pred_sum, seen = 0.0, 0.0, 0
        for batch in _batches(order, cfg.batch_size):
            model.zero_grad()
            class_loss, pred_loss = _batch_losses(model, x[batch], y[batch], "train", rng)
            total = class_loss + pred_loss * lam if joint else class_loss
            total.backward()
            if spec.kind in LSTM_KINDS:
                clip_gradients(model.parameters(), cfg.clip_norm)
            adam_step(model.parameters(), cfg.adam)
            class_sum += class_loss.item() * len(batch)
            if joint:
                pred_sum += pred_loss.item() * len(batch)
            seen += len(batch)
        log["class_loss"].append(class_sum / seen)
        if joint:
            log["pred_loss"].append(pred_sum / seen)
            log["lambda"].append(lam)
            lam = (class_sum / seen) / max(pred_sum / seen, 1e-12)
        logger.info("member seed %d epoch %d/%d loss %.4f", member_seed, epoch + 1, cfg.epochs, class_sum / seen)
    model.training_log = log
    return model


def train_fold(
    selection: DatasetSelection,
    fold: int,
    spec: ModelSpec,
    cfg: TrainConfig,
    store: RecordStore,
    preset: Optional[ExperimentPreset] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> Ensemble:
    """Train ``cfg.ensemble_size`` models on the fold's training split."""
    cfg.validate()
    entries = selection.train_split(fold)
    if preset is not None:
        entries = preset.train_entries(entries)
    present = {class_index(e, selection.label_scheme) for e in entries}
    missing = set(range(num_classes(selection.label_scheme))) - present
    if missing:
        raise DataError(f"Fold {fold} training split has no records of class(es) {sorted(missing)}")
    train_store = store.restrict(e.record_id for e in entries)
    members = []
    for member in range(cfg.ensemble_size):
        logger.info("fold %d: training member %d/%d", fold, member + 1, cfg.ensemble_size)
        model = train_member(
            spec, entries, train_store, cfg, selection.label_scheme, cfg.seed + member, stream_key=(fold,)
        )
        if out_dir is not None:
            save_model(model, Path(out_dir) / f"fold{fold}" / f"member{member}")
        members.append(model)
    return Ensemble(members)


def decide(probabilities: np.ndarray) -> int:
    """Binary: MI when P(MI) >= 0.5. Three classes: argmax."""
    if probabilities.shape[-1] == 2:
        return int(probabilities[1] >= DECISION_THRESHOLD)
    return int(np.argmax(probabilities))


def predict_record(
    ensemble: Union[Ensemble, Sequence[TrainedModel]],
    record: SignalRecord,
    cfg: TrainConfig,
) -> Tuple[np.ndarray, int]:
    """Mean ensemble softmax over the record's seeded evaluation windows."""
    ensemble = ensemble if isinstance(ensemble, Ensemble) else Ensemble(list(ensemble))
    batch = eval_windows(record, cfg.window_config(), cfg.seed, ensemble.spec.input_domain)
    probabilities = ensemble_predict(ensemble, batch).mean(axis=0)
    return probabilities, decide(probabilities)


def evaluate_records(
    ensemble: Ensemble,
    entries: Sequence[RecordEntry],
    store: RecordStore,
    cfg: TrainConfig,
    label_scheme: str,
    fold: int = -1,
) -> List[RecordPrediction]:
    out = []
    for entry in entries:
        probabilities, predicted = predict_record(ensemble, store[entry.record_id], cfg)
        out.append(RecordPrediction(entry.record_id, fold, class_index(entry, label_scheme), probabilities, predicted))
    return out


def run_crossval(
    preset: ExperimentPreset,
    spec: ModelSpec,
    cfg: TrainConfig,
    selection: DatasetSelection,
    store: RecordStore,
    out_dir: Optional[Union[str, Path]] = None,
    folds: Optional[Sequence[int]] = None,
) -> CrossValReport:
    """Train and evaluate every fold; test records are only read after training."""
    cfg.validate()
    if selection.k < 2:
        raise DataError("Selection needs a fold assignment before cross-validation")
    report = CrossValReport(preset=preset.name, seeds=[cfg.seed + m for m in range(cfg.ensemble_size)])
    three_class = selection.label_scheme == SCHEME_THREE_CLASS
    if three_class:
        report.class_confusion = np.zeros((3, 3), dtype=np.int64)
    for fold in folds if folds is not None else range(selection.k):
        logger.info("fold %d/%d (%s)", fold + 1, selection.k, preset.name)
        ensemble = train_fold(selection, fold, spec, cfg, store, preset, out_dir)
        test_entries = preset.eval_entries(selection.test_split(fold))
        predictions = evaluate_records(ensemble, test_entries, store, cfg, selection.label_scheme, fold)
        report.predictions.extend(predictions)
        report.fold_ids.append(fold)
        report.fold_matrices.append(
            ConfusionMatrix.from_decisions([p.is_mi for p in predictions], [p.predicted_mi for p in predictions])
        )
        if three_class:
            for p in predictions:
                report.class_confusion[p.true_class, p.predicted_class] += 1
    try:
        pooled = report.pooled_metrics
        logger.info("pooled J=%.3f sens=%.3f spec=%.3f", pooled.youden_j, pooled.sensitivity, pooled.specificity)
    except MetricUndefinedError:
        logger.warning("pooled metrics undefined for %s", preset.name)
    return report


def threshold_sweep(
    scores: Sequence[float], labels: Sequence[bool], thresholds: Sequence[float] = DEFAULT_SWEEP
) -> List[Tuple[float, ConfusionMatrix, Metrics]]:
    """Metrics when MI is decided at ``score >= threshold``; reporting only."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    out = []
    for threshold in sorted(thresholds):
        cm = ConfusionMatrix.from_decisions(labels, scores >= threshold)
        out.append((float(threshold), cm, compute_metrics(cm)))
    return out


def _row(fold: Union[int, str], cm: ConfusionMatrix) -> Dict[str, object]:
    try:
        metrics = compute_metrics(cm).to_dict()
    except MetricUndefinedError:
        metrics = {"sens": float("nan"), "spec": float("nan"), "prec": float("nan"), "J": float("nan")}
    return {"fold": fold, "TP": cm.TP, "FN": cm.FN, "TN": cm.TN, "FP": cm.FP, **metrics}


def report_frame(report: CrossValReport) -> pd.DataFrame:
    fold_ids = report.fold_ids or list(range(len(report.fold_matrices)))
    rows = [_row(fold, cm) for fold, cm in zip(fold_ids, report.fold_matrices)]
    rows.append(_row(POOLED_ROW, report.pooled_matrix))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def _write_frame(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    text = frame.to_csv(index=False, float_format="%.6f", lineterminator="\n", na_rep="nan")
    return atomic_write_text(Path(path), text)


def report_to_csv(report: CrossValReport, path: Union[str, Path]) -> Path:
    return _write_frame(report_frame(report), path)


def predictions_to_csv(report: CrossValReport, path: Union[str, Path]) -> Path:
    rows = [
        {
            "record_id": p.record_id,
            "fold": p.fold,
            "true_class": p.true_class,
            "predicted_class": p.predicted_class,
            "mi_score": p.mi_score,
        }
        for p in report.predictions
    ]
    frame = pd.DataFrame(rows, columns=["record_id", "fold", "true_class", "predicted_class", "mi_score"])
    return _write_frame(frame, path)


def report_summary(report: CrossValReport) -> str:
    lines = [f"preset: {report.preset}", f"seeds: {','.join(str(s) for s in report.seeds)}"]
    pooled = report.pooled_matrix
    lines.append(f"pooled counts: TP={pooled.TP} FN={pooled.FN} TN={pooled.TN} FP={pooled.FP}")
    try:
        m = report.pooled_metrics
        lines.append(
            f"pooled: J={m.youden_j:.3f} sens={m.sensitivity:.3f} spec={m.specificity:.3f} prec={m.precision:.3f}"
        )
    except MetricUndefinedError as exc:
        lines.append(f"pooled: undefined ({exc})")
    mean = report.mean_fold_metrics()
    if mean:
        lines.append(
            "fold mean: " + " ".join(f"{key}={value:.3f}" for key, value in mean.items())
        )
    if report.class_confusion is not None:
        lines.append("class confusion (rows true HC/aMI/iMI, cols predicted):")
        lines.extend("  " + " ".join(f"{v:4d}" for v in row) for row in report.class_confusion)
    scores = [p.mi_score for p in report.predictions]
    truth = [p.is_mi for p in report.predictions]
    if any(truth) and not all(truth):
        lines.append("threshold sweep (reporting only):")
        for threshold, _, metrics in threshold_sweep(scores, truth):
            lines.append(
                f"  t={threshold:.2f} J={metrics.youden_j:.3f} sens={metrics.sensitivity:.3f} "
                f"spec={metrics.specificity:.3f}"
            )
    return "\n".join(lines) + "\n"


def merge_fold_reports(paths: Sequence[Union[str, Path]], out_path: Union[str, Path]) -> Path:
    """Concatenate fold rows from several report CSVs and recompute the pooled row."""
    frames = []
    for path in paths:
        frame = pd.read_csv(path, dtype={"fold": str})
        frames.append(frame[frame["fold"] != POOLED_ROW])
    if not frames:
        raise EvaluationError("No fold reports to merge")
    folds = pd.concat(frames, ignore_index=True)
    if folds["fold"].duplicated().any():
        duplicated = sorted(folds.loc[folds["fold"].duplicated(), "fold"])
        raise EvaluationError(f"Duplicate folds across reports: {duplicated}")
    folds["fold"] = folds["fold"].astype(int)
    folds = folds.sort_values("fold")
    rows = [
        _row(int(r.fold), ConfusionMatrix(int(r.TP), int(r.FN), int(r.TN), int(r.FP)))
        for r in folds.itertuples(index=False)
    ]
    totals = ConfusionMatrix(
        int(folds["TP"].sum()), int(folds["FN"].sum()), int(folds["TN"].sum()), int(folds["FP"].sum())
    )
    rows.append(_row(POOLED_ROW, totals))
    return _write_frame(pd.DataFrame(rows, columns=REPORT_COLUMNS), out_path)


__all__ = [
    "TrainConfig",
    "RecordStore",
    "ConfusionMatrix",
    "Metrics",
    "RecordPrediction",
    "CrossValReport",
    "EvaluationError",
    "DataError",
    "MetricUndefinedError",
    "compute_metrics",
    "train_member",
    "train_fold",
    "predict_record",
    "evaluate_records",
    "run_crossval",
    "threshold_sweep",
    "report_frame",
    "report_to_csv",
    "predictions_to_csv",
    "report_summary",
    "merge_fold_reports",
]
