import math

import numpy as np
import pytest

from codac.metrics import auroc
from codac.signals import (
    ANOMALY_KINDS,
    UNLABELED,
    DataFormatError,
    TimeSeriesSegment,
    gen_healthy,
    inject_anomaly,
    make_dataset,
    make_healthy_pool,
    read_csv,
    split_by_patient,
    write_csv,
)


def test_gen_healthy_deterministic():
    a = gen_healthy("P001", 128, 2, 5)
    b = gen_healthy("P001", 128, 2, 5)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.label == 0 and not a.anomaly_mask.any()


def test_gen_healthy_normalised():
    for pid in ("A", "B", "C"):
        x = gen_healthy(pid, 128, 3, 0).x.astype(np.float64)
        np.testing.assert_allclose(x.mean(0), 0.0, atol=1e-6)
        np.testing.assert_allclose(x.std(0), 1.0, atol=1e-6)


def test_gen_healthy_preconditions():
    with pytest.raises(ValueError):
        gen_healthy("P", 16, 2, 0)
    with pytest.raises(ValueError):
        gen_healthy("P", 64, 0, 0)


def test_patients_have_distinct_spectral_peaks():
    # periodogram argmax over 100 pairs of patients; zero padding to 8T gives
    # 1/8-cycle resolution so nearby but distinct frequencies are told apart
    def peak(x):
        return int(np.argmax(np.abs(np.fft.rfft(x[:, 0].astype(np.float64), n=8 * len(x))) ** 2))

    differ = sum(peak(gen_healthy(f"A{i}", 128, 1, 0).x) != peak(gen_healthy(f"B{i}", 128, 1, 0).x) for i in range(100))
    assert differ >= 90


def test_inject_smallest_span_spike():
    seg = gen_healthy("P", 128, 2, 0)
    out = inject_anomaly(seg, "spike", 1 / 256, 3)
    assert out.anomaly_mask.sum() == 1 and out.label == 1


@pytest.mark.parametrize("kind", ANOMALY_KINDS)
def test_inject_locality_and_strength(kind):
    for s in range(20):
        seg = gen_healthy(f"P{s}", 128, 2, s)
        out = inject_anomaly(seg, kind, 0.15, s)
        m = out.anomaly_mask
        assert m.sum() == round(0.15 * 128)
        idx = np.nonzero(m)[0]
        assert np.all(np.diff(idx) == 1)
        assert np.array_equal(out.x[~m], seg.x[~m])
        sigma = seg.x.astype(np.float64).std(0)
        d = out.x[m].astype(np.float64) - seg.x[m].astype(np.float64)
        rms = np.sqrt((d * d).mean(0)) / sigma
        assert np.all(rms > 1.0), (kind, s, rms)


def test_inject_errors():
    seg = gen_healthy("P", 64, 1, 0)
    with pytest.raises(ValueError):
        inject_anomaly(seg, "wobble", 0.1, 0)
    with pytest.raises(ValueError):
        inject_anomaly(seg, "spike", 0.0, 0)
    with pytest.raises(ValueError):
        inject_anomaly(seg, "spike", 0.6, 0)


def test_segment_invariants():
    with pytest.raises(DataFormatError):
        TimeSeriesSegment("P", 0, np.zeros((4, 1)), np.array([1, 0, 0, 0], bool))
    with pytest.raises(DataFormatError):
        TimeSeriesSegment("P", 1, np.zeros((4, 1)), np.zeros(4, bool))


def test_make_dataset_shape_and_determinism():
    a = make_dataset(6, 3, 0.5, 64, 2, 1)
    b = make_dataset(6, 3, 0.5, 64, 2, 1)
    assert len(a) == 18
    assert all(s.x.shape == (64, 2) for s in a)
    assert all(x.x.tobytes() == y.x.tobytes() and x.label == y.label for x, y in zip(a, b))
    labels = {s.patient_id: set() for s in a}
    for s in a:
        labels[s.patient_id].add(s.label)
    assert all(len(v) == 1 for v in labels.values())
    assert sum(v == {1} for v in labels.values()) == 3


def test_variance_alone_is_a_weak_classifier():
    # per-segment variance, summed over channels, as a score
    segs = make_dataset()
    y = np.array([s.label for s in segs])
    var = np.array([s.x.astype(np.float64).var(0).sum() for s in segs])
    rough = np.array([np.abs(np.diff(s.x.astype(np.float64), axis=0)).mean() for s in segs])
    assert max(auroc(y, var), 1 - auroc(y, var)) < 0.75
    assert max(auroc(y, rough), 1 - auroc(y, rough)) > 0.75  # the signal is still there


def test_healthy_pool():
    pool = make_healthy_pool(20, 64, 2, 0)
    assert len(pool) == 20
    assert all(s.label == 0 and s.patient_id.startswith("H") for s in pool)


def test_split_patient_disjoint_over_seeds():
    segs = make_dataset(12, 2, 0.5, 32, 1, 0)
    for seed in range(50):
        sp = split_by_patient(segs, label_fraction=0.3, seed=seed)
        ids = [{s.patient_id for s in part} for part in (sp.train, sp.val, sp.test)]
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
        assert len(sp.train) + len(sp.val) + len(sp.test) == len(segs)


def test_split_label_fraction():
    segs = make_dataset(24, 8, 0.5, 32, 1, 0)
    sp = split_by_patient(segs, label_fraction=1.0, seed=0)
    assert all(s.label != UNLABELED for s in sp.train)
    sp = split_by_patient(segs, label_fraction=0.1, seed=0)
    n = len(sp.train)
    lab = sp.labeled_train
    assert len(lab) == math.ceil(0.1 * n)
    assert {s.label for s in lab} == {0, 1}
    assert len(sp.hidden_labels) == n - len(lab)


def test_split_hundred_train_segments():
    # 20 patients x 10 segments with half of the patients in train
    segs = make_dataset(20, 10, 0.5, 32, 1, 0)
    sp = split_by_patient(segs, (0.5, 0.25, 0.25), 0.1, 0)
    assert len(sp.train) == 100
    assert len(sp.labeled_train) == 10


def test_split_label_subsample_deterministic():
    segs = make_dataset(12, 4, 0.5, 32, 1, 0)
    a = split_by_patient(segs, label_fraction=0.25, seed=3)
    b = split_by_patient(segs, label_fraction=0.25, seed=3)
    assert [s.label for s in a.train] == [s.label for s in b.train]


def test_split_errors():
    segs = make_dataset(2, 2, 0.5, 32, 1, 0)
    with pytest.raises(ValueError):
        split_by_patient(segs)
    segs = make_dataset(6, 2, 0.5, 32, 1, 0)
    with pytest.raises(ValueError):
        split_by_patient(segs, (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        split_by_patient(segs, label_fraction=0.0)


def test_csv_round_trip(tmp_path):
    segs = make_dataset(4, 2, 0.5, 32, 2, 0)
    segs[0] = TimeSeriesSegment(segs[0].patient_id, UNLABELED, segs[0].x, segs[0].anomaly_mask)
    write_csv(segs, tmp_path / "d.csv")
    assert (tmp_path / "meta.txt").read_text() == "T=32\nD=2\n"
    back = read_csv(tmp_path / "d.csv")
    assert len(back) == len(segs)
    for a, b in zip(segs, back):
        assert (a.patient_id, a.label) == (b.patient_id, b.label)
        assert np.array_equal(a.anomaly_mask, b.anomaly_mask)
        np.testing.assert_allclose(a.x, b.x, atol=1e-6)


def test_csv_header_layout(tmp_path):
    write_csv(make_dataset(3, 1, 0.0, 32, 2, 0), tmp_path / "d.csv")
    head = (tmp_path / "d.csv").read_text().splitlines()[0].split(",")
    assert head[:5] == ["patient_id", "label", "mask", "c0_t0", "c0_t1"]
    assert head[-1] == "c1_t31" and len(head) == 3 + 64


def test_csv_errors(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(DataFormatError, match="empty dataset"):
        read_csv(p)
    write_csv(make_dataset(3, 1, 0.0, 32, 1, 0), tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    p.write_text("\n".join([lines[0], lines[1], lines[2] + ",1.0"]) + "\n")
    with pytest.raises(DataFormatError, match="row 2"):
        read_csv(p)
    p.write_text("\n".join([lines[0], lines[1].replace(",", ",x", 4)]) + "\n")
    with pytest.raises(DataFormatError):
        read_csv(p)
    p.write_text("id,label\n")
    with pytest.raises(DataFormatError, match="header"):
        read_csv(p)
