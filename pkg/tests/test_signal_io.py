import itertools
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcmd.signal_io import (
    LAYOUTS,
    SOURCE_LAYOUT,
    STUDENT_LAYOUT,
    TEACHER_LAYOUT,
    Channel,
    ChannelLayout,
    EDFParseError,
    EDFScalingError,
    EDFTruncatedError,
    HypnogramError,
    MissingChannelError,
    RawRecording,
    StageLabel,
    SynthConfig,
    SynthConfigError,
    load_edf,
    load_hypnogram,
    make_epochs,
    make_folds,
    read_annotations,
    synth_generate,
    trim_wake,
    write_edf,
    write_hypnogram_csv,
)
from mcmd.signal_io.edf import read_header

from oracles import edf_bytes


# ---------------------------------------------------------------- EDF

def test_edf_writer_matches_hand_encoded_fixture(tmp_path):
    rec = RawRecording("s", [Channel("EEG", np.array([0.0, 1.0, -1.0]), 1.0)], datetime(2000, 1, 1, 22), 3.0)
    path = tmp_path / "w.edf"
    write_edf(path, rec, ranges={"EEG": (-32768, 32767, -32768, 32767)})
    fixture = edf_bytes(["EEG"], [1.0], 1, [[[0]], [[1]], [[-1]]], [(-32768, 32767)], [(-32768, 32767)])
    written = path.read_bytes()
    # the writer may fill free-text fields differently; compare the structural fields
    assert written[:8] == fixture[:8]
    assert written[168:256] == fixture[168:256]
    assert written[256 + 16 + 80:] .replace(b" ", b"") == fixture[256 + 16 + 80:].replace(b" ", b"")
    assert load_edf(path).channels[0].samples.tolist() == [0.0, 1.0, -1.0]


def test_edf_reads_hand_encoded_fixture(tmp_path):
    path = tmp_path / "f.edf"
    path.write_bytes(edf_bytes(["EEG Fpz-Cz  ", "EMG"], [2, 1], 1,
                               [[[10, -20], [5]], [[30, 40], [-5]]],
                               [(-100, 100), (0, 1)], [(-100, 100), (-1, 1)]))
    rec = load_edf(path, "x")
    assert rec.labels == ["EEG Fpz-Cz", "EMG"]  # trailing spaces trimmed
    assert rec.duration == 2.0
    np.testing.assert_array_equal(rec.channel("EEG Fpz-Cz").samples, [10, -20, 30, 40])
    # physical = (d - dmin) * (pmax - pmin)/(dmax - dmin) + pmin
    np.testing.assert_allclose(rec.channel("EMG").samples, [(5 + 1) * 0.5, (-5 + 1) * 0.5])
    assert rec.channel("EMG").sampling_rate == 1.0


def test_edf_version_field_error(tmp_path):
    path = tmp_path / "v.edf"
    path.write_bytes(edf_bytes(["A"], [1], 1, [[[0]]], [(0, 1)], [(0, 1)], version="1"))
    with pytest.raises(EDFParseError) as e:
        load_edf(path)
    assert e.value.field == "version"


def test_edf_malformed_numeric_field_named(tmp_path):
    raw = bytearray(edf_bytes(["A"], [1], 1, [[[0]]], [(0, 1)], [(0, 1)]))
    raw[236:244] = b"abc     "  # n_records
    path = tmp_path / "m.edf"
    path.write_bytes(bytes(raw))
    with pytest.raises(EDFParseError) as e:
        load_edf(path)
    assert e.value.field == "n_records"


def test_edf_scaling_error(tmp_path):
    path = tmp_path / "s.edf"
    path.write_bytes(edf_bytes(["A"], [1], 1, [[[0]]], [(0, 1)], [(5, 5)]))
    with pytest.raises(EDFScalingError):
        load_edf(path)


def test_edf_truncated_reports_byte_counts(tmp_path):
    path = tmp_path / "t.edf"
    full = edf_bytes(["A"], [4], 1, [[[1, 2, 3, 4]], [[5, 6, 7, 8]]], [(0, 1)], [(0, 1)])
    path.write_bytes(full[:-3])
    with pytest.raises(EDFTruncatedError) as e:
        load_edf(path)
    assert (e.value.expected, e.value.actual) == (16, 13)


def test_edf_identity_scaling(tmp_path):
    vals = np.array([-3.0, 0.0, 7.0, 12.0])
    rec = RawRecording("s", [Channel("A", vals, 2.0)], duration=2.0)
    write_edf(tmp_path / "i.edf", rec, ranges={"A": (-100, 100, -100, 100)})
    np.testing.assert_array_equal(load_edf(tmp_path / "i.edf").channels[0].samples, vals)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_edf_round_trip_quantization_exact(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    n_ch = int(rng.integers(1, 4))
    dur = int(rng.integers(1, 6))
    chans = []
    ranges = {}
    for c in range(n_ch):
        rate = float(rng.choice([1, 8, 100, 128]))
        dmin, dmax = -32768, 32767
        pmin, pmax = float(-rng.integers(1, 500)), float(rng.integers(1, 500))
        digital = rng.integers(dmin, dmax + 1, size=int(rate * dur))
        step = (pmax - pmin) / (dmax - dmin)
        chans.append(Channel(f"ch{c}", (digital - dmin) * step + pmin, rate))
        ranges[f"ch{c}"] = (pmin, pmax, dmin, dmax)
    rec = RawRecording("r", chans, datetime(2001, 2, 3, 4, 5, 6), float(dur))
    path = tmp_path_factory.mktemp("edf") / "r.edf"
    write_edf(path, rec, ranges=ranges)
    back = load_edf(path)
    assert back.labels == rec.labels and back.duration == rec.duration
    assert back.start_time == rec.start_time
    for a, b in zip(rec.channels, back.channels):
        assert a.sampling_rate == b.sampling_rate
        np.testing.assert_array_equal(a.samples, b.samples)


def test_edf_plus_annotations_round_trip(tmp_path):
    rec = RawRecording("s", [Channel("A", np.zeros(60), 1.0)], duration=60.0)
    ann = [(0.0, 30.0, "Sleep stage W"), (30.0, 30.0, "Sleep stage 4")]
    write_edf(tmp_path / "a.edf", rec, annotations=ann)
    got = [a for a in read_annotations(tmp_path / "a.edf") if a[2]]
    assert got == ann
    assert load_edf(tmp_path / "a.edf").labels == ["A"]


# ---------------------------------------------------------------- hypnograms

def test_hypnogram_csv_direct_mapping(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("onset_s,duration_s,stage\n0,30,W\n30,30,R\n")
    assert load_hypnogram(p) == [(0.0, 30.0, StageLabel.WAKE), (30.0, 30.0, StageLabel.REM)]


def _annotation_hypnogram(tmp_path, stages):
    ann = [(30.0 * i, 30.0, s) for i, s in enumerate(stages)]
    path = tmp_path / "hyp.edf"
    write_edf(path, RawRecording("h", [], duration=0.0), annotations=ann)
    return path


def test_hypnogram_stage4_merges_into_n3(tmp_path):
    path = _annotation_hypnogram(tmp_path, ["Sleep stage 3", "Sleep stage 4", "Sleep stage R", "Movement time"])
    got = load_hypnogram(path, "edf_annotations")
    assert [s for _, _, s in got] == [StageLabel.N3, StageLabel.N3, StageLabel.REM]


def test_hypnogram_unknown_stage_named(tmp_path):
    path = _annotation_hypnogram(tmp_path, ["Sleep stage W", "Sleep stage ?"])
    with pytest.raises(HypnogramError, match=r"Sleep stage \?"):
        load_hypnogram(path, "edf_annotations")


def test_hypnogram_overlap_rejected(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("onset_s,duration_s,stage\n0,30,W\n20,30,N1\n")
    with pytest.raises(HypnogramError, match="overlap"):
        load_hypnogram(p)


def test_hypnogram_output_sorted(tmp_path):
    p = tmp_path / "h.csv"
    write_hypnogram_csv(p, [(60, 30, StageLabel.N2), (0, 30, StageLabel.WAKE), (30, 30, StageLabel.N1)])
    assert [o for o, _, _ in load_hypnogram(p)] == [0.0, 30.0, 60.0]


# ---------------------------------------------------------------- epochs

def _source_recording(seconds=90, rate=100.0, seed=0):
    rng = np.random.default_rng(seed)
    n = int(seconds * rate)
    chans = [Channel(l, rng.standard_normal(n), rate) for l in ("C4-A1", "EMG", "EOG")]
    return RawRecording("s0", chans, duration=float(seconds))


def _target_recording(seconds=90, rate=100.0, seed=0):
    rng = np.random.default_rng(seed)
    n = int(seconds * rate)
    chans = [Channel(l, rng.standard_normal(n), rate) for l in ("Fpz-Cz", "Pz-Oz", "EMG", "EOG")]
    return RawRecording("t0", chans, duration=float(seconds))


HYP3 = [(0.0, 30.0, StageLabel.WAKE), (30.0, 30.0, StageLabel.N2), (60.0, 30.0, StageLabel.REM)]


def test_layouts_have_four_slots():
    assert SOURCE_LAYOUT.ordered_channels == ("C4-A1", "C4-A1", "EMG", "EOG")
    assert TEACHER_LAYOUT.ordered_channels == ("Fpz-Cz", "Pz-Oz", "EMG", "EOG")
    assert STUDENT_LAYOUT.duplication_map == {"Fpz-Cz": [0, 1, 2, 3]}
    assert SOURCE_LAYOUT.duplication_map["C4-A1"] == [0, 1]
    with pytest.raises(ValueError):
        ChannelLayout("source", "bad", ("A", "B", "C"))


def test_source_epochs_duplicate_slot_0_and_1():
    rec = _source_recording()
    eps = make_epochs(rec, HYP3, SOURCE_LAYOUT)
    assert len(eps) == 3
    for i, e in enumerate(eps):
        assert e.signals.shape == (4, 3000)
        assert e.signals[0].tobytes() == e.signals[1].tobytes()
        np.testing.assert_array_equal(e.signals[2], rec.channel("EMG").samples[i * 3000:(i + 1) * 3000])
    assert [e.label for e in eps] == [StageLabel.WAKE, StageLabel.N2, StageLabel.REM]


def test_student_epochs_all_slots_identical():
    rec = _target_recording()
    for e in make_epochs(rec, HYP3, STUDENT_LAYOUT):
        assert all(e.signals[0].tobytes() == e.signals[k].tobytes() for k in range(1, 4))
        np.testing.assert_array_equal(e.signals[0], rec.channel("Fpz-Cz").samples[e.epoch_index * 3000:][:3000])


def test_short_recording_gives_no_epochs():
    assert make_epochs(_source_recording(seconds=20), HYP3, SOURCE_LAYOUT) == []


def test_missing_channel_named():
    with pytest.raises(MissingChannelError) as e:
        make_epochs(_source_recording(), HYP3, TEACHER_LAYOUT)
    assert e.value.role == "Fpz-Cz"


def test_channel_map_translates_roles():
    rec = _target_recording()
    renamed = RawRecording("t0", [Channel("EEG " + c.label, c.samples, c.sampling_rate) for c in rec.channels],
                           duration=rec.duration)
    cmap = {r: "EEG " + r for r in ("Fpz-Cz", "Pz-Oz", "EMG", "EOG")}
    a = make_epochs(renamed, HYP3, TEACHER_LAYOUT, cmap)
    b = make_epochs(rec, HYP3, TEACHER_LAYOUT)
    assert all(np.array_equal(x.signals, y.signals) for x, y in zip(a, b))


def test_epochs_lie_inside_one_matching_interval():
    hyp = [(0.0, 45.0, StageLabel.WAKE), (45.0, 75.0, StageLabel.N1), (120.0, 60.0, StageLabel.N3)]
    rec = _target_recording(seconds=180)
    eps = make_epochs(rec, hyp, TEACHER_LAYOUT)
    for e in eps:
        start, stop = 30 * e.epoch_index, 30 * (e.epoch_index + 1)
        inside = [s for o, d, s in hyp if o <= start and stop <= o + d]
        assert inside == [e.label]
    # epochs 1 (30-60 s) straddles two intervals and is dropped
    assert [e.epoch_index for e in eps] == [0, 2, 3, 4, 5]


def test_trim_wake_keeps_window_around_sleep():
    rec = _target_recording(seconds=30 * 200, rate=10.0)
    stages = [StageLabel.WAKE] * 100 + [StageLabel.N2] * 10 + [StageLabel.WAKE] * 90
    hyp = [(30.0 * i, 30.0, s) for i, s in enumerate(stages)]
    kept = trim_wake(make_epochs(rec, hyp, STUDENT_LAYOUT), minutes=30)
    idx = [e.epoch_index for e in kept]
    assert idx[0] == 40 and idx[-1] == 169 and len(idx) == 130
    assert len(trim_wake(make_epochs(rec, hyp, STUDENT_LAYOUT), minutes=None)) == 200


# ---------------------------------------------------------------- folds

def _check_partition(folds, subjects):
    tests = list(itertools.chain.from_iterable(f.test_subjects for f in folds))
    assert sorted(tests) == sorted(subjects)
    for f in folds:
        tr, va, te = set(f.train_subjects), set(f.valid_subjects), set(f.test_subjects)
        assert not (tr & va) and not (tr & te) and not (va & te)
        assert tr | va | te == set(subjects)


def test_loso_twenty_subjects():
    subs = [f"s{i:02d}" for i in range(20)]
    folds = make_folds(subs, 20, "leave_one_subject_out")
    assert len(folds) == 20
    assert len({f.test_subjects for f in folds}) == 20
    assert all(len(f.test_subjects) == 1 for f in folds)
    assert all(len(f.valid_subjects) == 2 for f in folds)  # 10% of 19, rounded
    _check_partition(folds, subs)


def test_grouped_six_subjects_three_folds():
    subs = list("abcdef")
    folds = make_folds(subs, 3, "grouped", seed=4)
    assert [len(f.test_subjects) for f in folds] == [2, 2, 2]
    _check_partition(folds, subs)
    assert make_folds(subs, 3, "grouped", seed=4) == folds


def test_single_subject_fold_uses_tails():
    (f,) = make_folds(["only"], 1)
    assert f.train_subjects == ("only",) and f.within_subject
    assert f.valid_tail > 0 and f.test_tail > 0


def test_fold_errors():
    with pytest.raises(ValueError):
        make_folds(["a", "b"], 3)
    with pytest.raises(ValueError):
        make_folds(["a", "b", "c"], 2, "leave_one_subject_out")


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 25), st.data())
def test_fold_partition_property(n, data):
    subs = [f"s{i}" for i in range(n)]
    k = data.draw(st.integers(1, n))
    seed = data.draw(st.integers(0, 1000))
    _check_partition(make_folds(subs, k, "grouped", seed), subs)


# ---------------------------------------------------------------- synthetic data

def test_synth_deterministic():
    cfg = SynthConfig(n_subjects_source=4, n_subjects_target=4, epochs_per_subject=120)
    a = synth_generate(cfg, 7)
    b = synth_generate(cfg, 7)
    for da, db in zip(a, b):
        for ra, rb in zip(da.recordings, db.recordings):
            for ca, cb in zip(ra.channels, rb.channels):
                assert ca.samples.tobytes() == cb.samples.tobytes()
        assert da.hypnograms == db.hypnograms
    c = synth_generate(cfg, 8)
    assert c[1].recordings[0].channels[0].samples.tobytes() != a[1].recordings[0].channels[0].samples.tobytes()


def test_synth_invalid_priors():
    with pytest.raises(SynthConfigError):
        synth_generate(SynthConfig(class_priors=(0.2, 0.2, 0.2, 0.2, 0.2 + 1e-6)), 0)


def test_synth_layouts_and_rates():
    src, tgt = synth_generate(SynthConfig(n_subjects_source=2, n_subjects_target=2, epochs_per_subject=10), 0)
    assert src.recordings[0].labels == ["C4-A1", "EMG", "EOG"]
    assert tgt.recordings[0].labels == ["Fpz-Cz", "Pz-Oz", "EMG", "EOG"]
    assert src.recordings[0].channels[0].sampling_rate == 128.0
    assert all(make_epochs(r, tgt.hypnograms[r.subject_id], LAYOUTS["teacher"]) for r in tgt.recordings)
