import pathlib
import struct
import sys

import numpy as np
import pytest

ROOT = pathlib.Path(__file__).resolve().parents[2] / "production"
sys.path.insert(0, str(ROOT))
import windowing  # type: ignore  # noqa: E402
from wfdb_io import RecordHeader, SignalRecord, SignalSpec  # type: ignore  # noqa: E402
from windowing import FftConfig, WindowBatch, WindowConfig  # type: ignore  # noqa: E402


def record_of(samples, fs=1000.0, name="r"):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    specs = tuple(SignalSpec(f"{name}.dat", "16", 2000.0, 16, 0, 0, 0, f"c{c}") for c in range(samples.shape[1]))
    header = RecordHeader(name, samples.shape[1], fs, samples.shape[0], specs)
    return SignalRecord(header=header, samples=samples)


@pytest.fixture
def ten_second_record(rng):
    return record_of(rng.normal(size=(10000, 3)), name="ten")


def test_sample_window_bounds(ten_second_record, rng):
    cfg = WindowConfig()
    for _ in range(50):
        window, start = windowing.sample_window(ten_second_record, cfg, rng)
        assert 0 <= start <= 6000
        assert window.shape == (4000, 3)
        np.testing.assert_array_equal(window, ten_second_record.samples[start : start + 4000])


def test_sample_window_exact_length_starts_at_zero(rng):
    record = record_of(np.zeros(4000))
    _, start = windowing.sample_window(record, WindowConfig(), rng)
    assert start == 0


def test_sample_window_too_short(rng):
    with pytest.raises(windowing.RecordTooShortError):
        windowing.sample_window(record_of(np.zeros(3999)), WindowConfig(), rng)


def test_downsample_constant_and_ramp():
    np.testing.assert_allclose(windowing.downsample(np.full((4000, 2), 0.7)), 0.7, atol=1e-15)
    ramp = np.arange(4000) / 3999.0
    out = windowing.downsample(ramp)
    assert out.shape == (192,)
    np.testing.assert_allclose(out, np.arange(192) / 191.0, atol=1e-12)


def test_downsample_keeps_endpoints(rng):
    window = rng.normal(size=(1000, 4))
    out = windowing.downsample(window, 50)
    np.testing.assert_allclose(out[0], window[0])
    np.testing.assert_allclose(out[-1], window[-1])


def test_downsample_same_length_is_identity(rng):
    window = rng.normal(size=(192, 2))
    np.testing.assert_allclose(windowing.downsample(window, 192), window, atol=1e-12)


def test_downsample_rejects_upsampling():
    with pytest.raises(windowing.UpsampleNotSupportedError):
        windowing.downsample(np.zeros(100), 192)


def test_fft_config_sizes():
    cfg = FftConfig(192)
    assert cfg.n_fft == 256
    assert cfg.n_components == 129
    assert FftConfig(256).n_fft == 256
    assert windowing.input_length("time") == 192
    assert windowing.input_length("frequency") == 129
    with pytest.raises(ValueError):
        windowing.input_length("wavelet")


def test_fft_features_of_impulse():
    impulse = np.zeros((192, 1))
    impulse[0, 0] = 1.0
    out = windowing.fft_features(impulse)
    assert out.shape == (129, 1)
    np.testing.assert_allclose(out, 1.0, atol=1e-12)


def test_fft_radix2_matches_numpy(rng):
    x = rng.normal(size=(64, 3)) + 1j * rng.normal(size=(64, 3))
    np.testing.assert_allclose(windowing.fft_radix2(x), np.fft.fft(x, axis=0), atol=1e-10)


def test_fft_radix2_rejects_other_lengths():
    with pytest.raises(ValueError):
        windowing.fft_radix2(np.zeros(192))


def test_fft_features_rejects_nan():
    window = np.zeros((192, 1))
    window[5, 0] = np.nan
    with pytest.raises(windowing.NumericError):
        windowing.fft_features(window)


def test_make_model_input_domains(ten_second_record):
    cfg = WindowConfig()
    time_input, start = windowing.make_model_input(ten_second_record, cfg, np.random.default_rng(5), "time")
    freq_input, start2 = windowing.make_model_input(ten_second_record, cfg, np.random.default_rng(5), "frequency")
    assert start == start2
    assert time_input.shape == (192, 3)
    np.testing.assert_allclose(freq_input, windowing.fft_features(time_input))


def test_eval_windows_deterministic(ten_second_record):
    cfg = WindowConfig()
    a = windowing.eval_windows(ten_second_record, cfg, seed=3)
    b = windowing.eval_windows(ten_second_record, cfg, seed=3)
    c = windowing.eval_windows(ten_second_record, cfg, seed=4)
    assert a.data.shape == (32, 192, 3)
    np.testing.assert_array_equal(a.data, b.data)
    assert a.provenance == b.provenance
    assert a.provenance != c.provenance
    assert all(name == "ten" for name, _ in a.provenance)
    assert len(windowing.eval_windows(ten_second_record, cfg, seed=3, count=5)) == 5


def test_window_batch_validation():
    with pytest.raises(ValueError):
        WindowBatch(np.zeros((4, 3)))
    with pytest.raises(windowing.NumericError):
        WindowBatch(np.full((1, 2, 1), np.inf))
    with pytest.raises(ValueError):
        WindowBatch(np.zeros((2, 3, 1)), provenance=[("r", 0)])


@pytest.mark.parametrize(
    "kwargs",
    [{"window_seconds": 0.0}, {"target_length": 1}, {"eval_windows_per_record": 0}],
)
def test_window_config_validate(kwargs):
    with pytest.raises(ValueError):
        WindowConfig(**kwargs).validate()


def test_dump_batch_layout(tmp_path, rng):
    data = rng.normal(size=(2, 5, 3))
    path = windowing.dump_batch(WindowBatch(data), tmp_path / "batch.bin")
    blob = path.read_bytes()
    assert struct.unpack_from("<4Q", blob, 0) == (3, 2, 5, 3)
    assert len(blob) == 32 + data.size * 8
    np.testing.assert_array_equal(windowing.load_batch(path), data)


def test_load_batch_truncated(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(struct.pack("<3Q", 2, 4, 4) + b"\x00" * 16)
    with pytest.raises(windowing.WindowingError):
        windowing.load_batch(path)
