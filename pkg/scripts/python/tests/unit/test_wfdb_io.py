import pathlib
import struct
import sys
from dataclasses import replace

import numpy as np
import pytest

ROOT = pathlib.Path(__file__).resolve().parents[2] / "production"
sys.path.insert(0, str(ROOT))
import wfdb_io  # type: ignore  # noqa: E402
from wfdb_io import (  # type: ignore  # noqa: E402
    ChecksumError,
    FormatError,
    LeadId,
    MissingLeadError,
    RecordHeader,
    SignalRecord,
    SignalSpec,
    UnsupportedFormatError,
)

MINIMAL = "x 1 1000 4000\nx.dat 16 2000/mV 16 0 0 0 0 i\n"


def make_record(columns, leads, gain=2000.0, name="r"):
    samples = np.column_stack([np.asarray(c, dtype=np.float64) for c in columns])
    specs = tuple(
        SignalSpec(
            file_name=f"{name}.dat",
            storage_format="16",
            gain=gain,
            adc_resolution=16,
            adc_zero=0,
            initial_value=0,
            checksum=0,
            lead_name=lead,
        )
        for lead in leads
    )
    header = RecordHeader(name, len(leads), 1000.0, samples.shape[0], specs)
    return SignalRecord(header=header, samples=samples)


def test_parse_minimal_header():
    header = wfdb_io.parse_header(MINIMAL)
    assert header.num_signals == 1
    assert header.num_samples == 4000
    assert header.sampling_rate == 1000.0
    assert header.signals[0].gain == 2000.0
    assert header.lead_names == ["i"]


def test_parse_header_comments_case_insensitive():
    text = MINIMAL + "# age: 81\n# Reason for admission: Myocardial infarction\n# Custom  key: kept\n"
    header = wfdb_io.parse_header(text)
    assert header.comment("REASON FOR ADMISSION") == "Myocardial infarction"
    assert header.comment(" custom key ") == "kept"
    assert header.comment_fields["age"] == "81"
    assert header.comment("missing", "n/a") == "n/a"


@pytest.mark.parametrize(
    "text",
    [
        "x 2 1000 4000\nx.dat 16 2000 16 0 0 0 0 i\n",
        "x 1 1000\nx.dat 16 2000 16 0 0 0 0 i\n",
        "x 1 fast 4000\nx.dat 16 2000 16 0 0 0 0 i\n",
        "x 1 1000 4000\nx.dat 16 gain 16 0 0 0 0 i\n",
        "x 1 1000 4000\nx.dat 16 2000 16 zero 0 0 0 i\n",
        "# only a comment\n",
    ],
)
def test_parse_header_malformed(text):
    with pytest.raises(FormatError):
        wfdb_io.parse_header(text)


def test_parse_header_rejects_other_formats():
    with pytest.raises(UnsupportedFormatError):
        wfdb_io.parse_header("x 1 1000 4000\nx.dat 212 200 12 0 0 0 0 i\n")


def test_parenthesized_baseline_is_honoured():
    header = wfdb_io.parse_header("x 1 1000 1\nx.dat 16 2000(100)/mV 16 0 300 300 0 i\n")
    assert header.signals[0].effective_baseline == 100
    record = wfdb_io.read_signal(header, struct.pack("<h", 300))
    assert record.samples[0, 0] == pytest.approx(0.1)


def test_read_signal_calibration():
    header = wfdb_io.parse_header("x 1 1000 2\nx.dat 16 2000 16 0 100 0 0 i\n")
    record = wfdb_io.read_signal(header, struct.pack("<2h", 100, -100))
    np.testing.assert_allclose(record.samples[:, 0], [0.05, -0.05])


def test_read_signal_all_zero():
    header = wfdb_io.parse_header("x 2 500 3\nx.dat 16 1000 16 0 0 0 0 i\nx.dat 16 1000 16 0 0 0 0 ii\n")
    record = wfdb_io.read_signal(header, bytes(12))
    assert not record.samples.any()


def test_read_signal_length_mismatch():
    header = wfdb_io.parse_header("x 1 1000 2\nx.dat 16 2000 16 0 100 0 0 i\n")
    with pytest.raises(FormatError):
        wfdb_io.read_signal(header, struct.pack("<h", 100))


def test_read_signal_checksum_mismatch_reports_channel():
    header = wfdb_io.parse_header("x 2 1000 1\nx.dat 16 2000 16 0 5 5 0 i\nx.dat 16 2000 16 0 7 8 0 ii\n")
    with pytest.raises(ChecksumError) as info:
        wfdb_io.read_signal(header, struct.pack("<2h", 5, 7))
    assert info.value.channel == 1
    assert info.value.expected == 8 and info.value.actual == 7


def test_checksum_wraps_to_signed_16_bit():
    assert wfdb_io.wfdb_checksum(np.array([30000, 30000])) == 60000 - 65536
    assert wfdb_io.wfdb_checksum(np.array([-5, 2])) == -3


def test_header_invariants():
    spec = SignalSpec("x.dat", "16", 2000.0, 16, 0, 0, 0, "i")
    with pytest.raises(FormatError):
        RecordHeader("x", 2, 1000.0, 10, (spec,))
    with pytest.raises(FormatError):
        RecordHeader("x", 1, 0.0, 10, (spec,))
    with pytest.raises(FormatError):
        RecordHeader("x", 1, 1000.0, 0, (spec,))
    with pytest.raises(FormatError):
        SignalRecord(RecordHeader("x", 1, 1000.0, 3, (spec,)), np.zeros((2, 1)))


def test_lead_id_parse_is_case_insensitive():
    assert LeadId.parse("AVR") is LeadId.aVR
    assert LeadId.parse(" v1 ") is LeadId.V1
    assert LeadId.parse("VX") is LeadId.vx
    with pytest.raises(MissingLeadError):
        LeadId.parse("v7")


def test_derive_limb_leads_values():
    record = wfdb_io.derive_limb_leads(make_record([[0.5], [0.8]], ["i", "ii"]))
    assert record.header.num_signals == 6
    assert record.channel("III")[0] == pytest.approx(0.3)
    assert record.channel("aVR")[0] == pytest.approx(-0.65)
    assert record.channel("aVL")[0] == pytest.approx(0.1)
    assert record.channel("aVF")[0] == pytest.approx(0.55)
    assert all(sig.derived for sig in record.header.signals[2:])


def test_einthoven_exact_in_floating_point(rng):
    lead_i = rng.normal(size=50)
    lead_ii = rng.normal(size=50)
    record = wfdb_io.derive_limb_leads(make_record([lead_i, lead_ii], ["I", "II"]))
    np.testing.assert_array_equal(record.channel("III"), lead_ii - lead_i)


def test_derive_limb_leads_is_idempotent():
    stored = make_record([[0.5], [0.8], [9.0], [1.0], [2.0], [3.0]], ["i", "ii", "iii", "avr", "avl", "avf"])
    derived = wfdb_io.derive_limb_leads(stored)
    assert derived.header.num_signals == 6
    assert derived.channel("III")[0] == 9.0


def test_derive_limb_leads_requires_i_and_ii():
    with pytest.raises(MissingLeadError):
        wfdb_io.derive_limb_leads(make_record([[0.5]], ["i"]))


def test_select_channels_canonical_order(small_synth_records):
    record, _ = small_synth_records[0]
    eight = wfdb_io.select_channels(record, "eight_nonredundant")
    assert [LeadId.parse(n) for n in eight.header.lead_names] == list(wfdb_io.EIGHT_NONREDUNDANT)
    np.testing.assert_array_equal(eight.samples[:, 2], record.channel("V1"))
    frank = wfdb_io.select_channels(record, "frank")
    assert frank.header.num_signals == 3
    assert [n.lower() for n in frank.header.lead_names] == ["vx", "vy", "vz"]


def test_select_single_lead_derives_when_missing():
    record = make_record([[0.5, 0.1], [0.8, 0.4]], ["i", "ii"])
    single = wfdb_io.select_channels(record, "single(III)")
    assert single.header.num_signals == 1
    np.testing.assert_allclose(single.samples[:, 0], [0.3, 0.3])


def test_select_channels_missing_lead():
    record = make_record([[0.5], [0.8]], ["i", "ii"])
    with pytest.raises(MissingLeadError):
        wfdb_io.select_channels(record, "frank")


def test_resolve_channel_set_aliases():
    assert wfdb_io.resolve_channel_set("eight") == wfdb_io.EIGHT_NONREDUNDANT
    assert len(wfdb_io.resolve_channel_set("twelve")) == 12
    assert len(wfdb_io.resolve_channel_set("all15")) == 15
    assert wfdb_io.resolve_channel_set("II") == (LeadId.II,)


def test_round_trip_is_exact(tmp_path, small_synth_records):
    record, _ = small_synth_records[-1]
    hea, dat = wfdb_io.write_record(record, tmp_path)
    assert hea.exists() and dat.exists()
    loaded = wfdb_io.load_record(hea.with_suffix(""))
    np.testing.assert_array_equal(loaded.samples, record.samples)
    assert loaded.header.comments == record.header.comments
    assert loaded.header.lead_names == record.header.lead_names


def test_calibration_linearity():
    header = wfdb_io.parse_header("x 1 1000 3\nx.dat 16 2000 16 0 10 -20 0 i\n")
    data = struct.pack("<3h", 10, -40, 10)
    base = wfdb_io.read_signal(header, data).samples
    scaled_header = wfdb_io.parse_header("x 1 1000 3\nx.dat 16 6000 16 0 10 -20 0 i\n")
    scaled = wfdb_io.read_signal(scaled_header, data).samples
    np.testing.assert_allclose(scaled, base / 3.0, rtol=1e-15)


def test_scan_database(tmp_path, small_synth_records):
    for record, entry in small_synth_records[:3]:
        wfdb_io.write_record(record, tmp_path / entry.patient_id)
    (tmp_path / "notes.hea").write_text("ignored")
    stems = wfdb_io.scan_database(tmp_path)
    assert len(stems) == 3
    assert stems == sorted(stems)
    assert all(stem.parent.parent == tmp_path for stem in stems)


def test_scan_database_missing_root(tmp_path):
    with pytest.raises(wfdb_io.WfdbError):
        wfdb_io.scan_database(tmp_path / "absent")


def test_quantize_rejects_overflow():
    record = make_record([[100.0]], ["i"])
    with pytest.raises(FormatError):
        wfdb_io.quantize(record)


TWO_FILE_HEADER = (
    "s0010_re 3 1000 2\n"
    "s0010_re.dat 16 2000 16 0 10 30 0 i\n"
    "s0010_re.dat 16 2000 16 0 -4 -10 0 ii\n"
    "s0010_re.xyz 16 2000 16 0 7 15 0 vx\n"
)


def test_load_record_reads_each_signal_file(tmp_path):
    (tmp_path / "s0010_re.hea").write_text(TWO_FILE_HEADER)
    (tmp_path / "s0010_re.dat").write_bytes(struct.pack("<4h", 10, -4, 20, -6))
    (tmp_path / "s0010_re.xyz").write_bytes(struct.pack("<2h", 7, 8))
    record = wfdb_io.load_record(tmp_path / "s0010_re")
    assert record.header.lead_names == ["i", "ii", "vx"]
    np.testing.assert_allclose(record.samples * 2000.0, [[10, -4, 7], [20, -6, 8]])
    np.testing.assert_allclose(record.channel("vx"), [7 / 2000.0, 8 / 2000.0])


def test_read_signal_checksum_in_second_file_reports_header_channel():
    header = wfdb_io.parse_header(TWO_FILE_HEADER)
    data = {"s0010_re.dat": struct.pack("<4h", 10, -4, 20, -6), "s0010_re.xyz": struct.pack("<2h", 7, 9)}
    with pytest.raises(ChecksumError) as info:
        wfdb_io.read_signal(header, data)
    assert info.value.channel == 2


def test_read_signal_needs_bytes_per_file_for_split_records():
    header = wfdb_io.parse_header(TWO_FILE_HEADER)
    with pytest.raises(FormatError):
        wfdb_io.read_signal(header, struct.pack("<6h", 10, -4, 7, 20, -6, 8))
    with pytest.raises(FormatError):
        wfdb_io.read_signal(header, {"s0010_re.dat": struct.pack("<4h", 10, -4, 20, -6)})


def test_load_record_missing_signal_file(tmp_path):
    (tmp_path / "s0010_re.hea").write_text(TWO_FILE_HEADER)
    (tmp_path / "s0010_re.dat").write_bytes(struct.pack("<4h", 10, -4, 20, -6))
    with pytest.raises(FormatError, match="s0010_re.xyz"):
        wfdb_io.load_record(tmp_path / "s0010_re")


def test_two_file_record_round_trip(tmp_path, rng):
    columns = [rng.integers(-3000, 3000, size=40) / 2000.0 for _ in range(4)]
    record = make_record(columns, ["i", "ii", "vx", "vy"], name="s0021are")
    signals = tuple(
        replace(sig, file_name="s0021are.xyz") if sig.lead_name.startswith("v") else sig
        for sig in record.header.signals
    )
    record = SignalRecord(header=replace(record.header, signals=signals), samples=record.samples)
    hea, dat = wfdb_io.write_record(record, tmp_path)
    assert dat.name == "s0021are.dat"
    assert (tmp_path / "s0021are.dat").stat().st_size == 2 * 40 * 2
    assert (tmp_path / "s0021are.xyz").stat().st_size == 2 * 40 * 2
    loaded = wfdb_io.load_record(hea.with_suffix(""))
    np.testing.assert_array_equal(loaded.samples, record.samples)
    assert [sig.file_name for sig in loaded.header.signals] == ["s0021are.dat"] * 2 + ["s0021are.xyz"] * 2
    assert wfdb_io.record_paths(hea.with_suffix("")) == [hea, dat, tmp_path / "s0021are.xyz"]


def test_derived_leads_quantize_on_their_own_grid(tmp_path, rng):
    columns = [rng.integers(-3000, 3000, size=25) / 2000.0 for _ in range(2)]
    derived = wfdb_io.derive_limb_leads(make_record(columns, ["i", "ii"], name="d"))
    assert [sig.gain for sig in derived.header.signals] == [2000.0] * 2 + [4000.0] * 4
    hea, _ = wfdb_io.write_record(derived, tmp_path)
    loaded = wfdb_io.load_record(hea.with_suffix(""))
    np.testing.assert_array_equal(wfdb_io.quantize(loaded), wfdb_io.quantize(derived))
    np.testing.assert_allclose(loaded.samples, derived.samples, rtol=0, atol=1e-12)
