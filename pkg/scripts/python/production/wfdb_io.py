"""WFDB record reader/writer and lead handling for PTB-style ECG records.

Only storage format 16 (little-endian interleaved signed 16-bit) is supported.
A record may spread its signals over several files (PTB keeps the twelve
standard leads in ``.dat`` and the Frank leads in ``.xyz``); each file holds
its own channels interleaved in header order. Samples are calibrated to mV as
``(raw - baseline) / gain`` where the baseline defaults to the ADC zero of the
channel.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

SUPPORTED_FORMAT = "16"
SAMPLE_DTYPE = np.dtype("<i2")
DEFAULT_GAIN = 2000.0
DEFAULT_ADC_RESOLUTION = 16
# Goldberger leads fall on half quanta of the I/II grid, so derived channels store at twice the gain.
DERIVED_GAIN_FACTOR = 2.0

_GAIN_PATTERN = re.compile(r"^(?P<gain>[-+0-9.eE]+)(?:\((?P<baseline>[-+0-9]+)\))?(?:/(?P<units>\S+))?$")
_FREQ_PATTERN = re.compile(r"^(?P<fs>[0-9.eE+-]+)")


class WfdbError(RuntimeError):
    pass


class FormatError(WfdbError):
    pass


class UnsupportedFormatError(WfdbError):
    pass


class MissingLeadError(WfdbError):
    pass


class ChecksumError(WfdbError):
    def __init__(self, channel: int, expected: int, actual: int):
        super().__init__(f"Checksum mismatch on channel {channel}: header {expected}, data {actual}")
        self.channel = channel
        self.expected = expected
        self.actual = actual


class LeadId(str, Enum):
    I = "I"  # noqa: E741
    II = "II"
    III = "III"
    aVR = "aVR"
    aVL = "aVL"
    aVF = "aVF"
    V1 = "V1"
    V2 = "V2"
    V3 = "V3"
    V4 = "V4"
    V5 = "V5"
    V6 = "V6"
    vx = "vx"
    vy = "vy"
    vz = "vz"

    @classmethod
    def parse(cls, name: str) -> "LeadId":
        key = name.strip().lower()
        for lead in cls:
            if lead.value.lower() == key:
                return lead
        raise MissingLeadError(f"Unknown lead name: {name!r}")


LIMB_LEADS: Tuple[LeadId, ...] = (LeadId.I, LeadId.II, LeadId.III, LeadId.aVR, LeadId.aVL, LeadId.aVF)
DERIVED_LIMB_LEADS: Tuple[LeadId, ...] = (LeadId.III, LeadId.aVR, LeadId.aVL, LeadId.aVF)
WILSON_LEADS: Tuple[LeadId, ...] = (LeadId.V1, LeadId.V2, LeadId.V3, LeadId.V4, LeadId.V5, LeadId.V6)
FRANK_LEADS: Tuple[LeadId, ...] = (LeadId.vx, LeadId.vy, LeadId.vz)
TWELVE_LEADS: Tuple[LeadId, ...] = LIMB_LEADS + WILSON_LEADS
EIGHT_NONREDUNDANT: Tuple[LeadId, ...] = (LeadId.I, LeadId.II) + WILSON_LEADS
ALL15_LEADS: Tuple[LeadId, ...] = TWELVE_LEADS + FRANK_LEADS

CHANNEL_SETS: Dict[str, Tuple[LeadId, ...]] = {
    "all15": ALL15_LEADS,
    "twelve": TWELVE_LEADS,
    "eight_nonredundant": EIGHT_NONREDUNDANT,
    "frank": FRANK_LEADS,
    "limb": LIMB_LEADS,
}


def resolve_channel_set(name: str) -> Tuple[LeadId, ...]:
    """Map a channel-set name (``all15`` ... or a single lead name) to canonical lead order."""
    key = name.strip()
    aliases = {"eight": "eight_nonredundant", "12": "twelve", "15": "all15"}
    key = aliases.get(key, key)
    if key in CHANNEL_SETS:
        return CHANNEL_SETS[key]
    if key.startswith("single(") and key.endswith(")"):
        key = key[len("single(") : -1]
    return (LeadId.parse(key),)


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    storage_format: str
    gain: float
    adc_resolution: int
    adc_zero: int
    initial_value: int
    checksum: int
    lead_name: str
    baseline: Optional[int] = None
    units: str = "mV"
    block_size: int = 0
    derived: bool = False

    @property
    def effective_baseline(self) -> int:
        return self.adc_zero if self.baseline is None else self.baseline

    def to_line(self) -> str:
        gain = f"{self.gain:g}"
        if self.baseline is not None and self.baseline != self.adc_zero:
            gain += f"({self.baseline})"
        return (
            f"{self.file_name} {self.storage_format} {gain}/{self.units} {self.adc_resolution} "
            f"{self.adc_zero} {self.initial_value} {self.checksum} {self.block_size} {self.lead_name}"
        )


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    num_signals: int
    sampling_rate: float
    num_samples: int
    signals: Tuple[SignalSpec, ...]
    comments: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.num_signals != len(self.signals):
            raise FormatError(f"Header declares {self.num_signals} signals but has {len(self.signals)} entries")
        if self.sampling_rate <= 0:
            raise FormatError(f"Sampling rate must be positive, got {self.sampling_rate}")
        if self.num_samples <= 0:
            raise FormatError(f"Number of samples must be positive, got {self.num_samples}")
        for idx, sig in enumerate(self.signals):
            if sig.gain <= 0:
                raise FormatError(f"Signal {idx} has non-positive gain {sig.gain}")

    @property
    def comment_fields(self) -> Dict[str, str]:
        return {key: value for key, value in self.comments}

    def comment(self, key: str, default: Optional[str] = None) -> Optional[str]:
        """Case-insensitive, whitespace-trimmed comment lookup."""
        wanted = _normalize_key(key)
        for existing, value in self.comments:
            if _normalize_key(existing) == wanted:
                return value
        return default

    @property
    def lead_names(self) -> List[str]:
        return [sig.lead_name for sig in self.signals]

    def to_text(self) -> str:
        lines = [f"{self.record_name} {self.num_signals} {self.sampling_rate:g} {self.num_samples}"]
        lines.extend(sig.to_line() for sig in self.signals)
        for key, value in self.comments:
            lines.append(f"# {key}: {value}" if value != "" else f"# {key}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SignalRecord:
    header: RecordHeader
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        expected = (self.header.num_samples, self.header.num_signals)
        if self.samples.shape != expected:
            raise FormatError(f"Sample matrix shape {self.samples.shape} does not match header {expected}")

    @property
    def record_name(self) -> str:
        return self.header.record_name

    @property
    def sampling_rate(self) -> float:
        return self.header.sampling_rate

    @property
    def num_samples(self) -> int:
        return self.header.num_samples

    @property
    def duration_seconds(self) -> float:
        return self.header.num_samples / self.header.sampling_rate

    def lead_index(self) -> Dict[LeadId, int]:
        index: Dict[LeadId, int] = {}
        for idx, name in enumerate(self.header.lead_names):
            try:
                lead = LeadId.parse(name)
            except MissingLeadError:
                continue
            index.setdefault(lead, idx)
        return index

    def channel(self, lead: Union[LeadId, str]) -> np.ndarray:
        lead = LeadId.parse(lead) if isinstance(lead, str) else lead
        index = self.lead_index()
        if lead not in index:
            raise MissingLeadError(f"Record {self.record_name} has no lead {lead.value}")
        return self.samples[:, index[lead]]


def _normalize_key(key: str) -> str:
    return " ".join(key.strip().lower().split())


def _parse_int(token: str, what: str) -> int:
    try:
        return int(token)
    except ValueError as exc:
        raise FormatError(f"Non-numeric {what}: {token!r}") from exc


def _parse_comment(line: str) -> Tuple[str, str]:
    body = line.lstrip("#").strip()
    if ":" in body:
        key, value = body.split(":", 1)
        return key.strip(), value.strip()
    return body, ""


def _parse_signal_line(line: str) -> SignalSpec:
    tokens = line.split()
    if len(tokens) < 2:
        raise FormatError(f"Signal line has too few fields: {line!r}")
    file_name, fmt = tokens[0], tokens[1]
    if fmt != SUPPORTED_FORMAT:
        raise UnsupportedFormatError(f"Storage format {fmt!r} is not supported (only format 16)")

    gain, baseline, units = DEFAULT_GAIN, None, "mV"
    if len(tokens) > 2:
        match = _GAIN_PATTERN.match(tokens[2])
        if not match:
            raise FormatError(f"Non-numeric gain field: {tokens[2]!r}")
        try:
            gain = float(match.group("gain"))
        except ValueError as exc:
            raise FormatError(f"Non-numeric gain field: {tokens[2]!r}") from exc
        if match.group("baseline") is not None:
            baseline = int(match.group("baseline"))
        units = match.group("units") or units
    adc_resolution = _parse_int(tokens[3], "ADC resolution") if len(tokens) > 3 else DEFAULT_ADC_RESOLUTION
    adc_zero = _parse_int(tokens[4], "ADC zero") if len(tokens) > 4 else 0
    initial_value = _parse_int(tokens[5], "initial value") if len(tokens) > 5 else adc_zero
    checksum = _parse_int(tokens[6], "checksum") if len(tokens) > 6 else 0
    block_size = _parse_int(tokens[7], "block size") if len(tokens) > 7 else 0
    lead_name = " ".join(tokens[8:]) if len(tokens) > 8 else ""
    return SignalSpec(
        file_name=file_name,
        storage_format=fmt,
        gain=gain,
        adc_resolution=adc_resolution,
        adc_zero=adc_zero,
        initial_value=initial_value,
        checksum=checksum,
        lead_name=lead_name,
        baseline=baseline,
        units=units,
        block_size=block_size,
    )


def parse_header(text: str) -> RecordHeader:
    """Parse the text of a WFDB ``.hea`` file."""
    comments: List[Tuple[str, str]] = []
    body: List[str] = []
    for raw in text.replace("\r\n", "\n").split("\n"):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            comments.append(_parse_comment(line))
        else:
            body.append(line)
    if not body:
        raise FormatError("Header has no record line")

    first = body[0].split()
    if len(first) < 4:
        raise FormatError(f"Malformed record line: {body[0]!r}")
    record_name = first[0]
    if "/" in record_name:
        raise FormatError(f"Multi-segment records are not supported: {record_name!r}")
    num_signals = _parse_int(first[1], "signal count")
    fs_match = _FREQ_PATTERN.match(first[2])
    if not fs_match:
        raise FormatError(f"Non-numeric sampling rate: {first[2]!r}")
    try:
        sampling_rate = float(fs_match.group("fs"))
    except ValueError as exc:
        raise FormatError(f"Non-numeric sampling rate: {first[2]!r}") from exc
    num_samples = _parse_int(first[3], "sample count")

    signal_lines = body[1:]
    if len(signal_lines) != num_signals:
        raise FormatError(f"Header declares {num_signals} signals but has {len(signal_lines)} signal lines")
    signals = tuple(_parse_signal_line(line) for line in signal_lines)
    return RecordHeader(
        record_name=record_name,
        num_signals=num_signals,
        sampling_rate=sampling_rate,
        num_samples=num_samples,
        signals=signals,
        comments=tuple(comments),
    )


def wfdb_checksum(raw: np.ndarray) -> int:
    """16-bit two's-complement sum of a channel's raw samples."""
    total = int(np.asarray(raw, dtype=np.int64).sum()) & 0xFFFF
    return total - 0x10000 if total >= 0x8000 else total


def signal_files(header: RecordHeader) -> Dict[str, List[int]]:
    """Channel indices per signal file, in header order (``.dat`` then ``.xyz`` for PTB)."""
    groups: Dict[str, List[int]] = {}
    for channel, sig in enumerate(header.signals):
        groups.setdefault(sig.file_name, []).append(channel)
    return groups


def read_signal(header: RecordHeader, data: Union[bytes, Mapping[str, bytes]]) -> SignalRecord:
    """Decode format-16 bytes, verify per-channel checksums, calibrate to mV.

    ``data`` is either the bytes of the record's only signal file or a mapping
    from each file name in the header to its bytes.
    """
    groups = signal_files(header)
    if isinstance(data, (bytes, bytearray, memoryview)):
        if len(groups) != 1:
            raise FormatError(f"Record {header.record_name} spreads signals over {sorted(groups)}; pass bytes per file")
        data = {next(iter(groups)): bytes(data)}
    raw = np.empty((header.num_samples, header.num_signals), dtype=np.int64)
    for file_name, channels in groups.items():
        if file_name not in data:
            raise FormatError(f"Record {header.record_name} is missing signal file {file_name}")
        block = data[file_name]
        expected = 2 * header.num_samples * len(channels)
        if len(block) != expected:
            raise FormatError(f"Signal file {file_name} has {len(block)} bytes, expected {expected}")
        raw[:, channels] = np.frombuffer(block, dtype=SAMPLE_DTYPE).reshape(header.num_samples, len(channels))
    for channel, sig in enumerate(header.signals):
        actual = wfdb_checksum(raw[:, channel])
        if actual != sig.checksum:
            raise ChecksumError(channel, sig.checksum, actual)
    baselines = np.array([sig.effective_baseline for sig in header.signals], dtype=np.float64)
    gains = np.array([sig.gain for sig in header.signals], dtype=np.float64)
    samples = (raw.astype(np.float64) - baselines) / gains
    return SignalRecord(header=header, samples=samples)


def quantize(record: SignalRecord) -> np.ndarray:
    """Invert calibration: mV back to raw ADC units (rounded, int16 range)."""
    baselines = np.array([sig.effective_baseline for sig in record.header.signals], dtype=np.float64)
    gains = np.array([sig.gain for sig in record.header.signals], dtype=np.float64)
    raw = np.rint(record.samples * gains + baselines)
    if raw.size and (raw.min() < -32768 or raw.max() > 32767):
        raise FormatError(f"Record {record.record_name} exceeds the 16-bit range after quantization")
    return raw.astype(np.int64)


def _output_file_name(record_name: str, sig: SignalSpec) -> str:
    suffix = Path(sig.file_name).suffix
    if sig.derived or not suffix:
        suffix = ".dat"
    return f"{record_name}{suffix}"


def encode_record(record: SignalRecord) -> Tuple[str, Dict[str, bytes]]:
    """Serialise to header text plus bytes per signal file, checksums recomputed from the data.

    Stored channels keep their file suffix (``.dat``/``.xyz``); derived channels go to ``.dat``.
    """
    raw = quantize(record)
    signals = []
    for channel, sig in enumerate(record.header.signals):
        signals.append(
            replace(
                sig,
                file_name=_output_file_name(record.record_name, sig),
                checksum=wfdb_checksum(raw[:, channel]),
                initial_value=int(raw[0, channel]),
                derived=False,
            )
        )
    header = replace(record.header, signals=tuple(signals))
    files = {name: raw[:, channels].astype(SAMPLE_DTYPE).tobytes() for name, channels in signal_files(header).items()}
    return header.to_text(), files


def write_record(record: SignalRecord, directory: Union[str, Path]) -> Tuple[Path, Path]:
    """Write ``.hea`` and every signal file; returns the header and the first signal file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    text, files = encode_record(record)
    hea_path = directory / f"{record.record_name}.hea"
    hea_path.write_text(text, encoding="ascii")
    paths = []
    for name, data in files.items():
        path = directory / name
        path.write_bytes(data)
        paths.append(path)
    return hea_path, paths[0]


def load_header(stem: Union[str, Path]) -> RecordHeader:
    path = Path(f"{stem}.hea")
    return parse_header(path.read_text(encoding="latin-1"))


def record_paths(stem: Union[str, Path], header: Optional[RecordHeader] = None) -> List[Path]:
    """The ``.hea`` path followed by each signal file of the record."""
    header = header or load_header(stem)
    parent = Path(stem).parent
    return [Path(f"{stem}.hea")] + [parent / name for name in signal_files(header)]


def load_record(stem: Union[str, Path]) -> SignalRecord:
    """Load ``<stem>.hea`` and its signal files (assumed next to the header)."""
    header = load_header(stem)
    parent = Path(stem).parent
    files = {}
    for name in signal_files(header):
        path = parent / name
        if not path.exists():
            raise FormatError(f"Record {header.record_name} is missing signal file {path}")
        files[name] = path.read_bytes()
    return read_signal(header, files)


def scan_database(root: Union[str, Path]) -> List[Path]:
    """Return record stems laid out as ``<root>/<patient>/<record>.hea``, sorted."""
    root = Path(root)
    if not root.is_dir():
        raise WfdbError(f"Data root does not exist: {root}")
    stems = sorted(p.with_suffix("") for p in root.glob("*/*.hea"))
    logger.info("Found %d records under %s", len(stems), root)
    return stems


def _append_channels(record: SignalRecord, leads: Sequence[LeadId], values: Sequence[np.ndarray]) -> SignalRecord:
    if not leads:
        return record
    template = record.header.signals[0]
    new_specs = list(record.header.signals)
    for lead in leads:
        new_specs.append(
            replace(
                template,
                lead_name=lead.value.lower() if template.lead_name.islower() else lead.value,
                gain=template.gain * DERIVED_GAIN_FACTOR,
                initial_value=template.adc_zero,
                checksum=0,
                baseline=None,
                derived=True,
            )
        )
    samples = np.column_stack([record.samples] + list(values))
    header = replace(record.header, num_signals=len(new_specs), signals=tuple(new_specs))
    return SignalRecord(header=header, samples=samples)


def derive_limb_leads(record: SignalRecord) -> SignalRecord:
    """Append III, aVR, aVL, aVF computed from I and II (Einthoven/Goldberger).

    Leads already stored in the record are left untouched.
    """
    index = record.lead_index()
    for lead in (LeadId.I, LeadId.II):
        if lead not in index:
            raise MissingLeadError(f"Record {record.record_name} lacks lead {lead.value} needed for derivation")
    lead_i = record.samples[:, index[LeadId.I]]
    lead_ii = record.samples[:, index[LeadId.II]]
    formulas = {
        LeadId.III: lambda: lead_ii - lead_i,
        LeadId.aVR: lambda: -(lead_i + lead_ii) / 2.0,
        LeadId.aVL: lambda: lead_i - lead_ii / 2.0,
        LeadId.aVF: lambda: lead_ii - lead_i / 2.0,
    }
    missing = [lead for lead in DERIVED_LIMB_LEADS if lead not in index]
    return _append_channels(record, missing, [formulas[lead]() for lead in missing])


def select_channels(record: SignalRecord, channel_set: Union[str, Sequence[LeadId]]) -> SignalRecord:
    """Reduce a record to a channel set in canonical lead order, deriving limb leads if needed."""
    leads = resolve_channel_set(channel_set) if isinstance(channel_set, str) else tuple(channel_set)
    index = record.lead_index()
    if any(lead not in index for lead in leads):
        if any(lead in DERIVED_LIMB_LEADS and lead not in index for lead in leads):
            record = derive_limb_leads(record)
            index = record.lead_index()
        missing = [lead.value for lead in leads if lead not in index]
        if missing:
            raise MissingLeadError(f"Record {record.record_name} lacks leads {missing}")
    columns = [index[lead] for lead in leads]
    header = replace(
        record.header,
        num_signals=len(columns),
        signals=tuple(record.header.signals[c] for c in columns),
    )
    return SignalRecord(header=header, samples=record.samples[:, columns].copy())


__all__ = [
    "LeadId",
    "RecordHeader",
    "SignalSpec",
    "SignalRecord",
    "WfdbError",
    "FormatError",
    "UnsupportedFormatError",
    "ChecksumError",
    "MissingLeadError",
    "CHANNEL_SETS",
    "resolve_channel_set",
    "parse_header",
    "read_signal",
    "encode_record",
    "write_record",
    "load_header",
    "load_record",
    "record_paths",
    "signal_files",
    "quantize",
    "scan_database",
    "derive_limb_leads",
    "select_channels",
    "wfdb_checksum",
]
