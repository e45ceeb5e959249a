"""Random window extraction, downsampling and frequency-domain features.

Features:
- Uniform random window offsets from an explicit ``numpy.random.Generator``
- Linear resampling to the network input length (both endpoints kept)
- Radix-2 decimation-in-time FFT magnitudes (zero-padded to a power of two)
- Seeded evaluation windows per record
- Flat binary dump/load of window batches for debugging
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from run_manifest import derive_seed
from wfdb_io import SignalRecord

logger = logging.getLogger(__name__)

WINDOW_SECONDS = 4.0
TARGET_LENGTH = 192
EVAL_WINDOWS_PER_RECORD = 32
TRAIN_WINDOWS_PER_RECORD_PER_EPOCH = 8

DOMAIN_TIME = "time"
DOMAIN_FREQUENCY = "frequency"
DOMAINS = (DOMAIN_TIME, DOMAIN_FREQUENCY)


class WindowingError(RuntimeError):
    pass


class RecordTooShortError(WindowingError):
    pass


class UpsampleNotSupportedError(WindowingError):
    pass


class NumericError(WindowingError):
    pass


@dataclass(frozen=True)
class WindowConfig:
    window_seconds: float = WINDOW_SECONDS
    target_length: int = TARGET_LENGTH
    eval_windows_per_record: int = EVAL_WINDOWS_PER_RECORD
    train_windows_per_record_per_epoch: int = TRAIN_WINDOWS_PER_RECORD_PER_EPOCH
    rng_seed: int = 0

    def validate(self) -> None:
        if self.window_seconds <= 0:
            raise ValueError(f"window_seconds must be positive, got {self.window_seconds}")
        if self.target_length < 2:
            raise ValueError(f"target_length must be >= 2, got {self.target_length}")
        if self.eval_windows_per_record < 1 or self.train_windows_per_record_per_epoch < 1:
            raise ValueError("window counts must be positive")

    def window_samples(self, sampling_rate: float) -> int:
        return int(round(self.window_seconds * sampling_rate))


@dataclass(frozen=True)
class FftConfig:
    d: int = TARGET_LENGTH

    @property
    def n_fft(self) -> int:
        return 1 << max(0, int(np.ceil(np.log2(self.d))))

    @property
    def n_components(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class WindowBatch:
    data: np.ndarray
    provenance: List[Tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"WindowBatch expects [batch x length x channels], got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("WindowBatch contains NaN or Inf")
        if self.provenance and len(self.provenance) != self.data.shape[0]:
            raise ValueError("provenance length does not match batch size")

    def __len__(self) -> int:
        return int(self.data.shape[0])


def input_length(domain: str, cfg: Optional[WindowConfig] = None) -> int:
    cfg = cfg or WindowConfig()
    if domain == DOMAIN_TIME:
        return cfg.target_length
    if domain == DOMAIN_FREQUENCY:
        return FftConfig(cfg.target_length).n_components
    raise ValueError(f"Unknown input domain: {domain!r}")


def sample_window(record: SignalRecord, cfg: WindowConfig, rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    """Return a contiguous ``[window x channels]`` slice and its start offset."""
    width = cfg.window_samples(record.sampling_rate)
    n = record.num_samples
    if n < width:
        raise RecordTooShortError(
            f"Record {record.record_name} has {n} samples, window needs {width} ({cfg.window_seconds:g} s)"
        )
    start = int(rng.integers(0, n - width + 1))
    return record.samples[start : start + width], start


def downsample(window: np.ndarray, target_length: int = TARGET_LENGTH) -> np.ndarray:
    """Per-channel linear interpolation onto ``target_length`` equispaced points."""
    window = np.asarray(window, dtype=np.float64)
    squeeze = window.ndim == 1
    if squeeze:
        window = window[:, None]
    n = window.shape[0]
    if target_length > n:
        raise UpsampleNotSupportedError(f"Cannot downsample {n} samples to {target_length}")
    positions = np.linspace(0.0, n - 1, target_length)
    left = np.floor(positions).astype(np.int64)
    left = np.minimum(left, n - 2) if n > 1 else left
    frac = (positions - left)[:, None]
    right = np.minimum(left + 1, n - 1)
    out = window[left] * (1.0 - frac) + window[right] * frac
    return out[:, 0] if squeeze else out


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 DIT FFT along axis 0 (length must be a power of two)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[0]
    if n & (n - 1) or n == 0:
        raise ValueError(f"FFT length must be a power of two, got {n}")
    out = x[_bit_reverse_indices(n)].copy()
    m = 2
    while m <= n:
        half = m // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = out.reshape((n // m, m) + out.shape[1:])
        even = blocks[:, :half].copy()
        odd = blocks[:, half:] * twiddle.reshape((1, half) + (1,) * (out.ndim - 1))
        blocks[:, :half] = even + odd
        blocks[:, half:] = even - odd
        out = blocks.reshape(out.shape)
        m *= 2
    return out


def fft_features(window: np.ndarray, cfg: Optional[FftConfig] = None) -> np.ndarray:
    """Magnitudes of the ``n_fft/2 + 1`` non-redundant bins per channel."""
    window = np.asarray(window, dtype=np.float64)
    cfg = cfg or FftConfig(window.shape[0])
    if window.shape[0] != cfg.d:
        raise ValueError(f"fft_features expects length {cfg.d}, got {window.shape[0]}")
    if not np.all(np.isfinite(window)):
        raise NumericError("fft_features received non-finite input")
    padded = np.zeros((cfg.n_fft,) + window.shape[1:], dtype=np.float64)
    padded[: cfg.d] = window
    return np.abs(fft_radix2(padded)[: cfg.n_components])


def make_model_input(
    record: SignalRecord,
    cfg: WindowConfig,
    rng: np.random.Generator,
    domain: str = DOMAIN_TIME,
) -> Tuple[np.ndarray, int]:
    """sample -> downsample -> optional FFT; returns (network input, start offset)."""
    raw, start = sample_window(record, cfg, rng)
    window = downsample(raw, cfg.target_length)
    if domain == DOMAIN_FREQUENCY:
        window = fft_features(window, FftConfig(cfg.target_length))
    elif domain != DOMAIN_TIME:
        raise ValueError(f"Unknown input domain: {domain!r}")
    return window, start


def eval_windows(
    record: SignalRecord,
    cfg: WindowConfig,
    seed: int,
    domain: str = DOMAIN_TIME,
    count: Optional[int] = None,
) -> WindowBatch:
    """Deterministic evaluation windows: the stream is keyed on (seed, record name)."""
    rng = np.random.default_rng(derive_seed(seed, "eval", record.record_name))
    count = cfg.eval_windows_per_record if count is None else count
    windows, provenance = [], []
    for _ in range(count):
        window, start = make_model_input(record, cfg, rng, domain)
        windows.append(window)
        provenance.append((record.record_name, start))
    return WindowBatch(np.stack(windows), provenance)


def dump_batch(batch: Union[WindowBatch, np.ndarray], path: Union[str, Path]) -> Path:
    """Write ``ndim`` and dims as u64 little-endian, then raw float64 little-endian data."""
    data = batch.data if isinstance(batch, WindowBatch) else np.asarray(batch, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack(f"<Q{data.ndim}Q", data.ndim, *data.shape)
    path.write_bytes(header + np.ascontiguousarray(data, dtype="<f8").tobytes())
    return path


def load_batch(path: Union[str, Path]) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise WindowingError(f"Batch file {path} is truncated")
    (ndim,) = struct.unpack_from("<Q", blob, 0)
    dims = struct.unpack_from(f"<{ndim}Q", blob, 8)
    offset = 8 + 8 * ndim
    expected = int(np.prod(dims)) * 8 if dims else 8
    if len(blob) - offset != expected:
        raise WindowingError(f"Batch file {path} has {len(blob) - offset} data bytes, expected {expected}")
    return np.frombuffer(blob, dtype="<f8", offset=offset).reshape(dims).astype(np.float64)


__all__ = [
    "WindowConfig",
    "FftConfig",
    "WindowBatch",
    "WindowingError",
    "RecordTooShortError",
    "UpsampleNotSupportedError",
    "NumericError",
    "input_length",
    "sample_window",
    "downsample",
    "fft_radix2",
    "fft_features",
    "make_model_input",
    "eval_windows",
    "dump_batch",
    "load_batch",
]
