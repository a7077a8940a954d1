import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import series
from neurotrack import dataset as ds
from neurotrack.errors import ArgumentError


def _ramp(n, fs, channels=1, name="x"):
    return series(np.tile(np.arange(n, dtype=float), (channels, 1)), fs, name)


# ---------------------------------------------------------------- splits


def test_split_fractions_1000_samples():
    parts = ds.split_recording({"x": _ramp(1000, 100)})
    train = [p["x"].data[0] for p in parts["train"]]
    assert (train[0][0], train[0][-1], len(train[0])) == (0, 399, 400)
    assert (train[1][0], train[1][-1], len(train[1])) == (600, 999, 400)
    val, test = parts["val"][0]["x"].data[0], parts["test"][0]["x"].data[0]
    assert (val[0], val[-1], len(val)) == (400, 499, 100)
    assert (test[0], test[-1], len(test)) == (500, 599, 100)


def test_split_degenerate_train_only():
    spec = ds.SplitSpec(train=((0.0, 1.0),), val=(), test=())
    parts = ds.split_recording({"x": _ramp(500, 10)}, spec)
    assert parts["val"] == [] and parts["test"] == []
    np.testing.assert_array_equal(parts["train"][0]["x"].data, _ramp(500, 10).data)


def test_split_cross_rate_alignment():
    dur = 123.4
    slow = _ramp(round(dur * 64), 64, name="env")
    fast = _ramp(round(dur * 1024), 1024, name="f0")
    parts = ds.split_recording({"env": slow, "f0": fast})
    for part in ("val", "test"):
        a, b = parts[part][0]["env"], parts[part][0]["f0"]
        assert abs(a.t0 - b.t0) <= 1 / 64
        assert abs(a.duration - b.duration) <= 1 / 64


@given(st.integers(min_value=20, max_value=5000))
@settings(max_examples=50, deadline=None)
def test_split_partitions_disjoint_and_ordered(n):
    parts = ds.split_recording({"x": _ramp(n, 10)})
    taken = np.concatenate([p["x"].data[0] for part in parts.values() for p in part])
    assert len(set(taken)) == len(taken)
    assert taken.size >= n - 4


def test_split_spec_must_cover_unit_interval():
    with pytest.raises(ArgumentError):
        ds.SplitSpec(train=((0.0, 0.5),), val=((0.4, 0.6),), test=((0.6, 1.0),))
    with pytest.raises(ArgumentError):
        ds.SplitSpec(train=((0.0, 0.5),), val=((0.5, 0.9),), test=())


def test_split_short_recording_warns():
    with pytest.warns(UserWarning):
        ds.split_recording({"x": _ramp(400, 10)}, segment_length=5.0)


def test_split_requires_same_span():
    with pytest.raises(ArgumentError):
        ds.split_recording({"a": _ramp(100, 10), "b": _ramp(300, 10)})


# ---------------------------------------------------------------- pairs


def test_pairs_60s_example():
    fs = 64
    eeg, stim = _ramp(60 * fs, fs, 2), _ramp(60 * fs, fs)
    pairs = ds.make_pairs(eeg, stim, T=5, hop=5, offset=1)
    assert len(pairs) == 10
    assert [p.origin["start_time"] for p in pairs] == [5.0 * k for k in range(10)]
    last = pairs[-1].mismatched["x"][0]
    assert (last[0] / fs, (last[-1] + 1) / fs) == (51.0, 56.0)


def test_pairs_infeasible_span():
    assert ds.make_pairs(_ramp(640, 64), _ramp(640, 64), T=5, offset=1) == []


def test_pairs_window_lengths_per_rate():
    env = {"envelope": _ramp(64 * 30, 64)}
    f0 = {"f0": _ramp(1024 * 30, 1024)}
    pairs = ds.make_pairs({**env, **f0}, {**env, **f0}, T=2)
    p = pairs[0]
    assert p.eeg["f0"].shape[1] == 2048 and p.matched["f0"].shape[1] == 2048
    assert p.eeg["envelope"].shape[1] == 128


def test_pair_geometry_invariants():
    fs = 64
    stim = _ramp(100 * fs, fs)
    for p in ds.make_pairs(_ramp(100 * fs, fs, 3), stim, T=5, hop=2, offset=1):
        m, mm, e = p.matched["x"][0], p.mismatched["x"][0], p.eeg["x"][0]
        assert m[0] == e[0]
        assert mm[0] == m[-1] + 1 + fs  # starts one second after the match ends
        assert len(m) == len(mm) == 5 * fs
        assert m[-1] < mm[0]


def test_pairs_cross_rate_same_interval():
    env, f0 = _ramp(64 * 40, 64, name="envelope"), _ramp(1024 * 40, 1024, name="f0")
    for p in ds.make_pairs({"envelope": env, "f0": f0}, {"envelope": env, "f0": f0}, T=5):
        t_env = p.matched["envelope"][0][0] / 64
        t_f0 = p.matched["f0"][0][0] / 1024
        assert abs(t_env - t_f0) <= 1 / 64


@given(
    span=st.floats(min_value=5, max_value=200),
    T=st.sampled_from([1.0, 2.0, 5.0]),
    hop=st.sampled_from([0.5, 1.0, 2.0, 5.0]),
    offset=st.sampled_from([0.0, 1.0, 2.5]),
)
@settings(max_examples=60, deadline=None)
def test_pair_count_formula(span, T, hop, offset):
    fs = 64
    n = int(round(span * fs))
    x = _ramp(n, fs)
    pairs = ds.make_pairs(x, x, T, hop, offset)
    examples = ds.alternate_labels(pairs) if pairs else []
    span = n / fs
    if span < 2 * T + offset:
        assert pairs == []
    else:
        expected = math.floor((span - 2 * T - offset) / hop + 1e-9) + 1
        assert len(examples) == 2 * expected


def test_pairs_do_not_leak_across_partitions():
    fs = 64
    x = _ramp(600 * fs, fs)
    parts = ds.split_recording({"x": x})
    for part, portions in parts.items():
        for portion in portions:
            lo = portion["x"].data[0][0]
            hi = portion["x"].data[0][-1]
            for p in ds.make_pairs(portion["x"], portion["x"], 5):
                assert lo <= p.matched["x"][0][0] and p.mismatched["x"][0][-1] <= hi


def test_pairs_reject_bad_arguments():
    x = _ramp(1000, 64)
    with pytest.raises(ArgumentError):
        ds.make_pairs(x, x, T=0)
    with pytest.raises(ArgumentError):
        ds.make_pairs(x, x, T=1, hop=0)
    with pytest.raises(ArgumentError):
        ds.make_pairs(x, _ramp(1000, 128), T=1)


# ---------------------------------------------------------------- labels and batches


def _pairs(n_pairs):
    fs = 64
    x = _ramp((11 + 5 * (n_pairs - 1)) * fs, fs)
    pairs = ds.make_pairs(x, x, 5)
    assert len(pairs) == n_pairs
    return pairs


def test_alternate_labels_balanced():
    ex = ds.alternate_labels(_pairs(10))
    assert len(ex) == 20
    assert sum(e.label for e in ex) == 10


def test_alternate_labels_single_pair():
    a, b = ds.alternate_labels(_pairs(1))
    assert {a.label, b.label} == {0, 1}
    np.testing.assert_array_equal(a.slot_a["x"], b.slot_b["x"])
    np.testing.assert_array_equal(a.slot_b["x"], b.slot_a["x"])
    assert a.pair is b.pair


def test_alternate_labels_empty():
    with pytest.raises(ArgumentError):
        ds.alternate_labels([])


def test_shuffled_batch_label_balance():
    labels = [1, 0] * 1600
    for b in ds.batch(labels, 64, seed=3):
        assert 0.3 <= np.mean(b) <= 0.7


def test_batch_sizes():
    assert [len(b) for b in ds.batch(list(range(130)), 64, seed=0)] == [64, 64, 2]


def test_batch_deterministic_and_seed_dependent():
    items = list(range(200))
    a = [tuple(b) for b in ds.batch(items, 64, seed=5)]
    b = [tuple(b) for b in ds.batch(items, 64, seed=5)]
    c = [tuple(b) for b in ds.batch(items, 64, seed=6)]
    d = [tuple(b) for b in ds.batch(items, 64, seed=5, epoch=1)]
    assert a == b
    assert a != c
    assert a != d


def test_batch_size_positive():
    with pytest.raises(ArgumentError):
        list(ds.batch([1, 2], 0, seed=0))


def test_collate_shapes_and_labels():
    ex = ds.alternate_labels(_pairs(3))
    inputs, labels = ds.collate(ex, dtype=np.float32)
    eeg, a, b = inputs["x"]
    assert eeg.shape == (6, 1, 320) and eeg.dtype == np.float32
    np.testing.assert_array_equal(labels, [1, 0, 1, 0, 1, 0])
    np.testing.assert_array_equal(a[0], b[1])


def test_pair_index_json(tmp_path):
    ex = ds.alternate_labels(_pairs(2))
    path = tmp_path / "index.json"
    ds.write_index(path, ex, recording="S01_story0")
    rows = json.loads(path.read_text())
    assert len(rows) == 4
    assert rows[0]["match_slot"] == "A" and rows[1]["match_slot"] == "B"
    assert rows[2]["start_samples"] == {"x": 320}


def test_standardize():
    s = ds.standardize(series(np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]), 10))
    np.testing.assert_allclose(s.data[0].mean(), 0, atol=1e-12)
    np.testing.assert_allclose(s.data[0].std(), 1)
    np.testing.assert_array_equal(s.data[1], 0.0)
