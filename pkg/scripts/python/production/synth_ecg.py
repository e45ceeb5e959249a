"""Synthetic labeled ECG records for desk-scale pipeline tests.

Beats are sums of Gaussian bumps (P, Q, R, S, T) placed at jittered RR
intervals. Healthy patient ``i`` and MI patient ``i`` share one random stream,
so the classes differ only by the configured pathology: an ST-segment offset
and a deepened Q wave on the affected leads. III, aVR, aVL and aVF are computed
from I and II before quantization to the WFDB grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from dataset import DiagnosisLabel, RecordEntry, entry_from_header
from run_manifest import derive_seed
from wfdb_io import (
    ALL15_LEADS,
    DERIVED_LIMB_LEADS,
    FRANK_LEADS,
    LeadId,
    RecordHeader,
    SignalRecord,
    SignalSpec,
    wfdb_checksum,
    write_record,
)

logger = logging.getLogger(__name__)

WAVES = ("P", "Q", "R", "S", "T")
# (offset from R peak in s, width in s)
WAVE_SHAPE: Dict[str, Tuple[float, float]] = {
    "P": (-0.20, 0.025),
    "Q": (-0.030, 0.010),
    "R": (0.0, 0.012),
    "S": (0.030, 0.010),
    "T": (0.28, 0.045),
}
# per independent lead: P, Q, R, S, T amplitudes in mV
LEAD_TEMPLATES: Dict[LeadId, Tuple[float, ...]] = {
    LeadId.I: (0.10, -0.05, 0.70, -0.10, 0.20),
    LeadId.II: (0.15, -0.08, 1.10, -0.20, 0.30),
    LeadId.V1: (0.05, -0.02, 0.30, -0.90, -0.10),
    LeadId.V2: (0.08, -0.04, 0.50, -1.10, 0.35),
    LeadId.V3: (0.08, -0.06, 0.80, -0.70, 0.40),
    LeadId.V4: (0.10, -0.08, 1.30, -0.40, 0.40),
    LeadId.V5: (0.10, -0.08, 1.20, -0.25, 0.30),
    LeadId.V6: (0.10, -0.06, 0.90, -0.15, 0.25),
    LeadId.vx: (0.06, -0.05, 0.80, -0.20, 0.20),
    LeadId.vy: (0.08, -0.05, 0.90, -0.15, 0.25),
    LeadId.vz: (0.04, -0.10, 0.50, -0.40, -0.15),
}
ST_WINDOW = (0.04, 0.20)
RR_JITTER = 0.02
RR_JITTER_CLIP = 0.05
SYNTH_GAIN = 2000.0
BASE_DATE = date(1995, 1, 2)


class SynthError(RuntimeError):
    pass


class ConfigError(SynthError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_patients: int = 40
    records_per_patient: int = 1
    sampling_rate: float = 1000.0
    duration: float = 12.0
    heart_rate: Tuple[float, float] = (60.0, 90.0)
    leads: Tuple[str, ...] = tuple(lead.value for lead in ALL15_LEADS)
    st_offset: float = 0.2
    q_factor: float = 2.0
    affected_leads: Tuple[str, ...] = ("II", "V1", "V2", "V3", "V4", "vx")
    noise_std: float = 0.05
    mi_localizations: Tuple[str, ...] = ("anterior", "inferior")
    seed: int = 0

    def validate(self) -> None:
        if self.num_patients < 1 or self.records_per_patient < 1:
            raise ConfigError("num_patients and records_per_patient must be positive")
        if self.sampling_rate <= 0 or self.duration <= 0:
            raise ConfigError("sampling_rate and duration must be positive")
        low, high = self.heart_rate
        if not 0 < low <= high:
            raise ConfigError(f"Invalid heart-rate range {self.heart_rate}")
        if self.st_offset < 0:
            raise ConfigError(f"ST offset must be >= 0, got {self.st_offset}")
        if self.noise_std < 0:
            raise ConfigError(f"noise std must be >= 0, got {self.noise_std}")
        if self.q_factor < 0:
            raise ConfigError(f"Q factor must be >= 0, got {self.q_factor}")
        if not self.mi_localizations:
            raise ConfigError("mi_localizations must not be empty")
        try:
            leads = {LeadId.parse(name) for name in self.leads}
            affected = {LeadId.parse(name) for name in self.affected_leads}
        except Exception as exc:
            raise ConfigError(str(exc)) from exc
        if affected & set(DERIVED_LIMB_LEADS):
            raise ConfigError("Affected leads must be independent leads (III, aVR, aVL, aVF are derived)")
        if not affected <= leads:
            raise ConfigError(f"Affected leads {sorted(a.value for a in affected - leads)} are not generated")
        if not leads:
            raise ConfigError("At least one lead is required")


@dataclass
class BeatSchedule:
    r_peaks: np.ndarray = field(default_factory=lambda: np.zeros(0))
    heart_rate: float = 60.0


def rr_schedule(duration: float, heart_rate: float, rng: np.random.Generator) -> BeatSchedule:
    """R-peak times (s) with clipped Gaussian RR jitter and a random phase."""
    rr = 60.0 / heart_rate
    peaks = []
    t = float(rng.uniform(0.0, rr))
    while t < duration:
        peaks.append(t)
        jitter = float(np.clip(rng.normal(0.0, RR_JITTER), -RR_JITTER_CLIP, RR_JITTER_CLIP))
        t += rr * (1.0 + jitter)
    return BeatSchedule(np.asarray(peaks), heart_rate)


def _wave_basis(times: np.ndarray, schedule: BeatSchedule) -> Tuple[np.ndarray, np.ndarray]:
    """Per-wave sums of unit Gaussian bumps ``[T x 5]`` and the ST-window indicator ``[T]``."""
    basis = np.zeros((times.size, len(WAVES)))
    st_mask = np.zeros(times.size)
    for r in schedule.r_peaks:
        for idx, wave in enumerate(WAVES):
            offset, width = WAVE_SHAPE[wave]
            basis[:, idx] += np.exp(-0.5 * ((times - r - offset) / width) ** 2)
        st_mask[(times >= r + ST_WINDOW[0]) & (times <= r + ST_WINDOW[1])] = 1.0
    return basis, st_mask


def _record_name(patient_number: int, record_index: int) -> str:
    return f"s{patient_number:04d}_{record_index}"


def _patient_id(patient_number: int) -> str:
    return f"patient{patient_number:03d}"


def _quantize(samples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    raw = np.rint(samples * SYNTH_GAIN).astype(np.int64)
    return raw, raw / SYNTH_GAIN


def _comments(is_mi: bool, localization: str, record_index: int, demo: np.random.Generator) -> List[Tuple[str, str]]:
    ecg_date = BASE_DATE + timedelta(days=int(demo.integers(0, 3000)) + record_index)
    comments = [
        ("age", str(int(demo.integers(30, 80)))),
        ("sex", "male" if demo.random() < 0.7 else "female"),
        ("ECG date", ecg_date.strftime("%d/%m/%Y")),
        ("Reason for admission", "Myocardial infarction" if is_mi else "Healthy control"),
    ]
    if is_mi:
        infarction = ecg_date - timedelta(days=1 + record_index)
        comments.append(("Acute infarction (localization)", localization))
        comments.append(("Infarction date (acute)", infarction.strftime("%d-%b-%y")))
    return comments


def _synth_record(
    cfg: SynthConfig, patient_index: int, record_index: int, is_mi: bool, localization: str
) -> Tuple[SignalRecord, RecordEntry]:
    # one stream per (patient index, record index): healthy and MI twins share it
    rng = np.random.default_rng(derive_seed(cfg.seed, "synth", patient_index, record_index))
    heart_rate = float(rng.uniform(*cfg.heart_rate))
    schedule = rr_schedule(cfg.duration, heart_rate, rng)
    n = int(round(cfg.duration * cfg.sampling_rate))
    times = np.arange(n) / cfg.sampling_rate
    basis, st_mask = _wave_basis(times, schedule)

    independent = [lead for lead in LEAD_TEMPLATES]
    amplitudes = np.array([LEAD_TEMPLATES[lead] for lead in independent]).T  # [5 x leads]
    amplitudes = amplitudes * rng.uniform(0.8, 1.2, size=(1, len(independent)))
    noise = rng.normal(0.0, 1.0, size=(n, len(independent))) * cfg.noise_std

    affected = [independent.index(LeadId.parse(name)) for name in cfg.affected_leads]
    if is_mi:
        amplitudes[WAVES.index("Q"), affected] *= cfg.q_factor
    signals = basis @ amplitudes + noise
    if is_mi:
        signals[:, affected] += cfg.st_offset * st_mask[:, None]

    by_lead = {lead: signals[:, idx] for idx, lead in enumerate(independent)}
    lead_i, lead_ii = by_lead[LeadId.I], by_lead[LeadId.II]
    by_lead[LeadId.III] = lead_ii - lead_i
    by_lead[LeadId.aVR] = -(lead_i + lead_ii) / 2.0
    by_lead[LeadId.aVL] = lead_i - lead_ii / 2.0
    by_lead[LeadId.aVF] = lead_ii - lead_i / 2.0

    leads = [LeadId.parse(name) for name in cfg.leads]
    raw, samples = _quantize(np.column_stack([by_lead[lead] for lead in leads]))

    patient_number = patient_index + 1 + (cfg.num_patients if is_mi else 0)
    name = _record_name(patient_number, record_index)
    # PTB layout: Frank leads live in a separate .xyz file
    specs = tuple(
        SignalSpec(
            file_name=f"{name}.xyz" if lead in FRANK_LEADS else f"{name}.dat",
            storage_format="16",
            gain=SYNTH_GAIN,
            adc_resolution=16,
            adc_zero=0,
            initial_value=int(raw[0, c]),
            checksum=wfdb_checksum(raw[:, c]),
            lead_name=lead.value.lower(),
        )
        for c, lead in enumerate(leads)
    )
    demo = np.random.default_rng(derive_seed(cfg.seed, "demographics", is_mi, patient_index))
    comments = _comments(is_mi, localization, record_index, demo)
    header = RecordHeader(
        record_name=name,
        num_signals=len(leads),
        sampling_rate=cfg.sampling_rate,
        num_samples=n,
        signals=specs,
        comments=tuple(comments),
    )
    record = SignalRecord(header=header, samples=samples)
    entry = entry_from_header(header, _patient_id(patient_number))
    if entry is None:
        raise SynthError(f"Generated header for {name} has no usable diagnosis")
    return record, entry


def generate(cfg: SynthConfig) -> List[Tuple[SignalRecord, RecordEntry]]:
    """Healthy patients first, then MI patients; deterministic given ``cfg.seed``."""
    cfg.validate()
    out: List[Tuple[SignalRecord, RecordEntry]] = []
    for is_mi in (False, True):
        for patient_index in range(cfg.num_patients):
            localization = cfg.mi_localizations[patient_index % len(cfg.mi_localizations)]
            for record_index in range(cfg.records_per_patient):
                out.append(_synth_record(cfg, patient_index, record_index, is_mi, localization))
    logger.info("Generated %d synthetic records (%d patients per class)", len(out), cfg.num_patients)
    return out


def export_dataset(
    records: Sequence[Tuple[SignalRecord, Union[RecordEntry, DiagnosisLabel]]], root: Union[str, Path]
) -> List[Path]:
    """Write ``<root>/<patient>/<record>.{hea,dat,xyz}``; returns the record stems."""
    root = Path(root)
    stems = []
    for record, entry in records:
        patient = entry.patient_id if isinstance(entry, RecordEntry) else "patient000"
        hea, _ = write_record(record, root / patient)
        stems.append(hea.with_suffix(""))
    logger.info("Exported %d records to %s", len(stems), root)
    return stems


__all__ = [
    "SynthConfig",
    "SynthError",
    "ConfigError",
    "BeatSchedule",
    "rr_schedule",
    "generate",
    "export_dataset",
]
