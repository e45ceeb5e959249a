"""Record selection, labeling, patient-level folds and oversampling.

Features:
- Labels from PTB-style header comments (healthy control vs myocardial infarction)
- Infarction localization -> aggregated group (aMI / iMI), with PTB spelling aliases
- First-ECG-per-MI-patient rule (date first, lowest record id otherwise)
- Patient-level stratified k-fold assignment (strata HC / aMI / iMI) and leakage audit
- 2:1 healthy-control oversampling plan
- Experiment presets (architecture table, subdiagnosis matrix, literature benchmark, channel ablation)
- CSV manifest import/export so selections and folds are replayable
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import StratifiedKFold

from wfdb_io import RecordHeader

logger = logging.getLogger(__name__)

HC = "HC"
AMI = "aMI"
IMI = "iMI"
UNKNOWN_MI = "unknownMI"
GROUPS = (HC, AMI, IMI, UNKNOWN_MI)

SCHEME_BINARY = "binary_MI_vs_HC"
SCHEME_THREE_CLASS = "three_class_HC_aMI_iMI"
SCHEME_CUSTOM = "custom"
LABEL_SCHEMES = (SCHEME_BINARY, SCHEME_THREE_CLASS, SCHEME_CUSTOM)

DEFAULT_FOLDS = 10
HC_MULTIPLICITY = 2
MI_MULTIPLICITY = 1
MANIFEST_COLUMNS = ["record_id", "patient_id", "label", "group", "fold"]

ANTERIOR_LOCALIZATIONS = ("anterior", "antero-septal", "antero-septo-lateral", "antero-lateral", "lateral")
INFERIOR_LOCALIZATIONS = (
    "inferior",
    "infero-posterior",
    "infero-postero-lateral",
    "infero-lateral",
    "posterior",
    "postero-lateral",
)
LOCALIZATION_GROUPS: Dict[str, str] = {
    **{loc: AMI for loc in ANTERIOR_LOCALIZATIONS},
    **{loc: IMI for loc in INFERIOR_LOCALIZATIONS},
}

# PTB header spellings that differ from the canonical names above
LOCALIZATION_ALIASES: Dict[str, str] = {
    "infero-latera": "infero-lateral",
    "infero-poster-lateral": "infero-postero-lateral",
    "infero-postero-latera": "infero-postero-lateral",
    "inferoposterior": "infero-posterior",
    "inferolateral": "infero-lateral",
    "anteroseptal": "antero-septal",
    "anterio-septal": "antero-septal",
    "antero-septo-latera": "antero-septo-lateral",
    "anterolateral": "antero-lateral",
    "antero-latera": "antero-lateral",
    "posterolateral": "postero-lateral",
}
UNKNOWN_LOCALIZATION_TOKENS = {"", "no", "unknown", "n/a", "na", "none", "?"}

REASON_KEY = "reason for admission"
LOCALIZATION_KEY = "acute infarction (localization)"
ECG_DATE_KEY = "ecg date"
INFARCTION_DATE_PREFIX = "infarction date"
CATHETERIZATION_DATE_PREFIX = "catheterization date"
DATE_FORMATS = ("%d/%m/%Y", "%d-%b-%y", "%d-%b-%Y", "%d.%m.%Y", "%Y-%m-%d")


class DatasetError(RuntimeError):
    pass


class EmptySelectionError(DatasetError):
    pass


class UnknownLocalizationError(DatasetError):
    pass


class StratificationError(DatasetError):
    pass


class ConfigError(DatasetError):
    pass


class LeakageError(DatasetError):
    pass


def normalize_localization(localization: str) -> str:
    key = "-".join(part.strip() for part in " ".join(localization.strip().lower().split()).split("-"))
    return LOCALIZATION_ALIASES.get(key, key)


def group_subdiagnosis(localization: str) -> str:
    """Map a localization string to its aggregated group (aMI or iMI)."""
    key = normalize_localization(localization)
    if key not in LOCALIZATION_GROUPS:
        raise UnknownLocalizationError(f"Unknown infarction localization: {localization!r}")
    return LOCALIZATION_GROUPS[key]


@dataclass(frozen=True)
class DiagnosisLabel:
    kind: str
    localization: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (HC, "MI"):
            raise DatasetError(f"Unknown diagnosis kind: {self.kind!r}")
        if self.kind == HC and self.localization is not None:
            raise DatasetError("Healthy controls carry no localization")

    @classmethod
    def healthy(cls) -> "DiagnosisLabel":
        return cls(HC)

    @classmethod
    def mi(cls, localization: Optional[str]) -> "DiagnosisLabel":
        if localization is None or normalize_localization(localization) in UNKNOWN_LOCALIZATION_TOKENS:
            return cls("MI", None)
        return cls("MI", normalize_localization(localization))

    @property
    def is_mi(self) -> bool:
        return self.kind == "MI"

    @property
    def group(self) -> str:
        if self.kind == HC:
            return HC
        if self.localization is None or self.localization not in LOCALIZATION_GROUPS:
            return UNKNOWN_MI
        return LOCALIZATION_GROUPS[self.localization]

    def to_text(self) -> str:
        if self.kind == HC:
            return HC
        return f"MI:{self.localization or 'unknown'}"

    @classmethod
    def from_text(cls, text: str) -> "DiagnosisLabel":
        text = text.strip()
        if text == HC:
            return cls.healthy()
        if text.startswith("MI"):
            _, _, loc = text.partition(":")
            return cls.mi(loc or None)
        raise DatasetError(f"Unparseable label: {text!r}")


@dataclass(frozen=True)
class RecordEntry:
    patient_id: str
    record_id: str
    label: DiagnosisLabel
    record_date: Optional[date] = None
    infarction_date: Optional[date] = None
    catheterization_date: Optional[date] = None
    treated_flag: Optional[bool] = None
    age: Optional[float] = None
    sex: Optional[str] = None

    @property
    def group(self) -> str:
        return self.label.group

    @property
    def mi_age_days(self) -> Optional[int]:
        if self.record_date is None or self.infarction_date is None:
            return None
        return (self.record_date - self.infarction_date).days


@dataclass(frozen=True)
class DatasetSelection:
    entries: Tuple[RecordEntry, ...]
    label_scheme: str = SCHEME_BINARY
    fold_of: Dict[str, int] = field(default_factory=dict)
    k: int = 0

    def __post_init__(self):
        if self.label_scheme not in LABEL_SCHEMES:
            raise ConfigError(f"Unknown label scheme: {self.label_scheme!r}")
        ids = [e.record_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("record_id values must be unique within a selection")
        folds_per_patient: Dict[str, set] = {}
        for entry in self.entries:
            if entry.record_id in self.fold_of:
                folds_per_patient.setdefault(entry.patient_id, set()).add(self.fold_of[entry.record_id])
        split = [p for p, folds in folds_per_patient.items() if len(folds) > 1]
        if split:
            raise LeakageError(f"Patients assigned to more than one fold: {sorted(split)}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def patients(self) -> List[str]:
        return sorted({e.patient_id for e in self.entries})

    @property
    def record_ids(self) -> List[str]:
        return [e.record_id for e in self.entries]

    def entry(self, record_id: str) -> RecordEntry:
        for e in self.entries:
            if e.record_id == record_id:
                return e
        raise KeyError(record_id)

    def patient_group(self, patient_id: str) -> str:
        groups = {e.group for e in self.entries if e.patient_id == patient_id}
        # an MI patient keeps its MI group even if a stray HC entry exists
        for group in (AMI, IMI, UNKNOWN_MI, HC):
            if group in groups:
                return group
        raise KeyError(patient_id)

    def train_split(self, fold: int) -> List[RecordEntry]:
        self._check_fold(fold)
        return [e for e in self.entries if self.fold_of[e.record_id] != fold]

    def test_split(self, fold: int) -> List[RecordEntry]:
        self._check_fold(fold)
        return [e for e in self.entries if self.fold_of[e.record_id] == fold]

    def _check_fold(self, fold: int) -> None:
        if not self.fold_of:
            raise DatasetError("Selection has no fold assignment")
        if not 0 <= fold < self.k:
            raise DatasetError(f"Fold {fold} outside 0..{self.k - 1}")

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "record_id": e.record_id,
                "patient_id": e.patient_id,
                "label": e.label.to_text(),
                "group": e.group,
                "fold": self.fold_of.get(e.record_id, -1),
                "age": e.age,
                "sex": e.sex,
                "treated": e.treated_flag,
                "mi_age_days": e.mi_age_days,
            }
            for e in self.entries
        ]
        return pd.DataFrame(rows, columns=MANIFEST_COLUMNS + ["age", "sex", "treated", "mi_age_days"])


@dataclass(frozen=True)
class SamplingPlan:
    epoch_multiplicity: Dict[str, int]

    def __post_init__(self):
        bad = {rid: m for rid, m in self.epoch_multiplicity.items() if m < 1}
        if bad:
            raise ConfigError(f"Multiplicities must be positive: {bad}")

    @property
    def epoch_size(self) -> int:
        return int(sum(self.epoch_multiplicity.values()))

    def schedule(self, record_ids: Iterable[str]) -> List[str]:
        """Record ids repeated by multiplicity, in the given order."""
        out: List[str] = []
        for rid in record_ids:
            out.extend([rid] * self.epoch_multiplicity[rid])
        return out


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    channel_set: str
    label_scheme: str = SCHEME_BINARY
    train_groups: FrozenSet[str] = frozenset({AMI, IMI})
    eval_groups: FrozenSet[str] = frozenset({AMI, IMI})
    first_mi_only: bool = True
    mi_localizations: Optional[Tuple[str, ...]] = None
    description: str = ""

    def train_entries(self, entries: Iterable[RecordEntry]) -> List[RecordEntry]:
        return [e for e in entries if e.group == HC or e.group in self.train_groups]

    def eval_entries(self, entries: Iterable[RecordEntry]) -> List[RecordEntry]:
        """All healthy controls plus positives restricted to ``eval_groups``."""
        return [e for e in entries if e.group == HC or e.group in self.eval_groups]

    def select(self, entries: Sequence[RecordEntry]) -> DatasetSelection:
        return select_records(
            entries,
            first_mi_only=self.first_mi_only,
            mi_localizations=self.mi_localizations,
            label_scheme=self.label_scheme,
        )


def _preset_table() -> Dict[str, ExperimentPreset]:
    mi = frozenset({AMI, IMI})
    groups = {"mi": mi, "ami": frozenset({AMI}), "imi": frozenset({IMI})}
    presets: Dict[str, ExperimentPreset] = {
        "table3_default": ExperimentPreset(
            "table3_default", "eight_nonredundant", description="12-lead set fed as 8 non-redundant channels"
        ),
        "table5_literature": ExperimentPreset(
            "table5_literature",
            "limb",
            train_groups=frozenset({IMI}),
            eval_groups=frozenset({IMI}),
            first_mi_only=False,
            mi_localizations=("inferior",),
            description="limb leads; healthy controls plus every inferior MI ECG",
        ),
    }
    # subdiagnosis train/eval matrix
    matrix = [
        ("mi", "mi"),
        ("mi", "ami"),
        ("mi", "imi"),
        ("ami", "ami"),
        ("imi", "imi"),
        ("ami_imi", "mi"),
        ("ami_imi", "ami"),
        ("ami_imi", "imi"),
    ]
    for train, evaluate in matrix:
        name = f"table4_train_{train}_eval_{evaluate}"
        three_class = train == "ami_imi"
        presets[name] = ExperimentPreset(
            name,
            "eight_nonredundant",
            label_scheme=SCHEME_THREE_CLASS if three_class else SCHEME_BINARY,
            train_groups=mi if three_class else groups[train],
            eval_groups=groups[evaluate],
            description=f"train {train} / eval {evaluate}",
        )
    for suffix, channels in (
        ("all15", "all15"),
        ("twelve", "eight_nonredundant"),
        ("frank", "frank"),
        ("limb", "limb"),
        ("I", "I"),
        ("II", "II"),
        ("III", "III"),
    ):
        name = f"table6_{suffix}"
        presets[name] = ExperimentPreset(name, channels, description=f"channel ablation: {suffix}")
    return presets


PRESETS: Dict[str, ExperimentPreset] = _preset_table()


def benchmark_preset(name: str) -> ExperimentPreset:
    try:
        return PRESETS[name]
    except KeyError as exc:
        raise ConfigError(f"Unknown preset {name!r}; expected one of {sorted(PRESETS)}") from exc


def parse_date(text: Optional[str]) -> Optional[date]:
    if text is None:
        return None
    text = text.strip()
    if text.lower() in UNKNOWN_LOCALIZATION_TOKENS:
        return None
    for fmt in DATE_FORMATS:
        try:
            return datetime.strptime(text, fmt).date()
        except ValueError:
            continue
    logger.debug("Unparseable date %r", text)
    return None


def _comment_with_prefix(header: RecordHeader, prefix: str) -> Optional[str]:
    for key, value in header.comments:
        if " ".join(key.strip().lower().split()).startswith(prefix):
            return value
    return None


def _parse_age(text: Optional[str]) -> Optional[float]:
    if text is None:
        return None
    try:
        return float(text)
    except ValueError:
        return None


def entry_from_header(header: RecordHeader, patient_id: str, record_id: Optional[str] = None) -> Optional[RecordEntry]:
    """Build a RecordEntry from header comments; None for diagnoses other than HC/MI."""
    reason = (header.comment(REASON_KEY) or "").strip().lower()
    if reason.startswith("healthy control"):
        label = DiagnosisLabel.healthy()
    elif reason.startswith("myocardial infarction"):
        label = DiagnosisLabel.mi(header.comment(LOCALIZATION_KEY))
    else:
        return None
    record_date = parse_date(header.comment(ECG_DATE_KEY))
    cath_date = parse_date(_comment_with_prefix(header, CATHETERIZATION_DATE_PREFIX))
    treated = None
    if label.is_mi and record_date is not None and cath_date is not None:
        treated = record_date > cath_date
    sex = header.comment("sex")
    return RecordEntry(
        patient_id=patient_id,
        record_id=record_id or f"{patient_id}/{header.record_name}",
        label=label,
        record_date=record_date,
        infarction_date=parse_date(_comment_with_prefix(header, INFARCTION_DATE_PREFIX)) if label.is_mi else None,
        catheterization_date=cath_date,
        treated_flag=treated,
        age=_parse_age(header.comment("age")),
        sex=sex.strip().lower() if sex else None,
    )


def _first_record(records: List[RecordEntry]) -> RecordEntry:
    if all(r.record_date is not None for r in records):
        return min(records, key=lambda r: (r.record_date, r.record_id))
    if len(records) > 1:
        logger.warning(
            "Patient %s has undated MI records; keeping lowest record id", records[0].patient_id
        )
    return min(records, key=lambda r: r.record_id)


def select_records(
    all_records: Sequence[RecordEntry],
    *,
    first_mi_only: bool = True,
    mi_localizations: Optional[Sequence[str]] = None,
    label_scheme: str = SCHEME_BINARY,
) -> DatasetSelection:
    """Keep every HC record and, per MI patient, the first record with a known localization."""
    healthy = [r for r in all_records if r.label.kind == HC]
    mi = [r for r in all_records if r.label.is_mi]
    known = [r for r in mi if r.group != UNKNOWN_MI]
    excluded = len(mi) - len(known)
    if excluded:
        logger.info(
            "Excluded %d MI records from %d patients with unknown localization",
            excluded,
            len({r.patient_id for r in mi if r.group == UNKNOWN_MI}),
        )
    if mi_localizations is not None:
        wanted = {normalize_localization(loc) for loc in mi_localizations}
        known = [r for r in known if r.label.localization in wanted]
    if first_mi_only:
        by_patient: Dict[str, List[RecordEntry]] = {}
        for r in known:
            by_patient.setdefault(r.patient_id, []).append(r)
        known = [_first_record(records) for _, records in sorted(by_patient.items())]
    entries = sorted(healthy + known, key=lambda r: r.record_id)
    if not entries:
        raise EmptySelectionError("Selection is empty")
    logger.info("Selected %d MI + %d HC records", len(known), len(healthy))
    return DatasetSelection(entries=tuple(entries), label_scheme=label_scheme)


def assign_folds(selection: DatasetSelection, k: int = DEFAULT_FOLDS, seed: int = 0) -> DatasetSelection:
    """Patient-level fold assignment stratified by HC / aMI / iMI."""
    if k < 2:
        raise StratificationError(f"k must be >= 2, got {k}")
    patients = selection.patients
    strata = [selection.patient_group(p) for p in patients]
    counts = pd.Series(strata).value_counts()
    too_small = {group: int(n) for group, n in counts.items() if n < k}
    if too_small:
        raise StratificationError(f"k={k} exceeds the patient count of strata {too_small}")
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    fold_of_patient: Dict[str, int] = {}
    for fold, (_, test_idx) in enumerate(splitter.split(np.zeros(len(patients)), strata)):
        for idx in test_idx:
            fold_of_patient[patients[idx]] = fold
    fold_of = {e.record_id: fold_of_patient[e.patient_id] for e in selection.entries}
    return replace(selection, fold_of=fold_of, k=k)


def leakage_audit(selection: DatasetSelection) -> Dict[int, List[str]]:
    """Patients shared between train and test, per fold (empty lists when clean)."""
    report: Dict[int, List[str]] = {}
    for fold in range(selection.k):
        train = {e.patient_id for e in selection.train_split(fold)}
        test = {e.patient_id for e in selection.test_split(fold)}
        report[fold] = sorted(train & test)
    return report


def make_sampling_plan(selection: Union[DatasetSelection, Iterable[RecordEntry]]) -> SamplingPlan:
    entries = selection.entries if isinstance(selection, DatasetSelection) else list(selection)
    return SamplingPlan(
        {e.record_id: HC_MULTIPLICITY if e.group == HC else MI_MULTIPLICITY for e in entries}
    )


def _median_iqr(values: pd.Series) -> Dict[str, Optional[float]]:
    present = values.dropna().astype(float)
    if present.empty:
        return {"median": None, "iqr": None, "nans": int(values.isna().sum())}
    q1, q3 = np.percentile(present, [25, 75])
    return {"median": float(present.median()), "iqr": float(q3 - q1), "nans": int(values.isna().sum())}


def summarize_selection(selection: DatasetSelection) -> Dict[str, Dict[str, object]]:
    """Demographics per class (MI, HC, all) in the layout of a cohort summary table."""
    frame = selection.to_frame()
    frame["is_mi"] = frame["label"].str.startswith("MI")
    summary: Dict[str, Dict[str, object]] = {}
    for name, part in (("MI", frame[frame.is_mi]), ("HC", frame[~frame.is_mi]), ("all", frame)):
        stats: Dict[str, object] = {
            "patients": int(part["patient_id"].nunique()),
            "records": int(len(part)),
            "male": int((part["sex"] == "male").sum()),
            "female": int((part["sex"] == "female").sum()),
            "age": _median_iqr(part["age"]),
        }
        if name == "MI":
            treated = part["treated"]
            stats["treated"] = int((treated == True).sum())  # noqa: E712
            stats["untreated"] = int((treated == False).sum())  # noqa: E712
            stats["treatment_nans"] = int(treated.isna().sum())
            stats["mi_age_days"] = _median_iqr(part["mi_age_days"])
            stats["groups"] = {g: int(part.loc[part.group == g, "patient_id"].nunique()) for g in (AMI, IMI)}
        summary[name] = stats
    return summary


def export_manifest(selection: DatasetSelection, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    selection.to_frame()[MANIFEST_COLUMNS].to_csv(path, index=False, lineterminator="\n")
    return path


def import_manifest(path: Union[str, Path], label_scheme: str = SCHEME_BINARY) -> DatasetSelection:
    frame = pd.read_csv(path, dtype={"record_id": str, "patient_id": str, "label": str, "group": str})
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise DatasetError(f"Manifest {path} lacks columns {missing}")
    entries = []
    fold_of: Dict[str, int] = {}
    for row in frame.itertuples(index=False):
        label = DiagnosisLabel.from_text(row.label)
        if label.group != row.group:
            raise DatasetError(f"Manifest row {row.record_id}: label {row.label} does not match group {row.group}")
        entries.append(RecordEntry(patient_id=row.patient_id, record_id=row.record_id, label=label))
        if int(row.fold) >= 0:
            fold_of[row.record_id] = int(row.fold)
    k = max(fold_of.values()) + 1 if fold_of else 0
    return DatasetSelection(entries=tuple(entries), label_scheme=label_scheme, fold_of=fold_of, k=k)


def class_index(entry: RecordEntry, label_scheme: str) -> int:
    """Training target: binary HC=0 / MI=1, three-class HC=0 / aMI=1 / iMI=2."""
    if label_scheme == SCHEME_THREE_CLASS:
        if entry.group == UNKNOWN_MI:
            raise DatasetError(f"Record {entry.record_id} has no subdiagnosis group")
        return {HC: 0, AMI: 1, IMI: 2}[entry.group]
    return 1 if entry.label.is_mi else 0


def num_classes(label_scheme: str) -> int:
    return 3 if label_scheme == SCHEME_THREE_CLASS else 2


__all__ = [
    "DiagnosisLabel",
    "RecordEntry",
    "DatasetSelection",
    "SamplingPlan",
    "ExperimentPreset",
    "PRESETS",
    "DatasetError",
    "EmptySelectionError",
    "UnknownLocalizationError",
    "StratificationError",
    "ConfigError",
    "LeakageError",
    "group_subdiagnosis",
    "normalize_localization",
    "entry_from_header",
    "select_records",
    "assign_folds",
    "leakage_audit",
    "make_sampling_plan",
    "benchmark_preset",
    "summarize_selection",
    "export_manifest",
    "import_manifest",
    "class_index",
    "num_classes",
]
