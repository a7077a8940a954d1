import numpy as np
import pytest

from neurotrack import container as C
from neurotrack import experiment as E
from neurotrack.errors import ArgumentError, PlanError
from neurotrack.synth import SynthConfig
from neurotrack.training import TrainConfig

SUBJECTS = ("S00", "S01", "S02", "S03")
FAST = TrainConfig(epochs=2, patience=1, dtype="float32")


@pytest.fixture(scope="module")
def store():
    return E.synthetic_cohort(4, SynthConfig(duration=200, n_channels=4, seed=20), dtype=np.float32)


def _plan(condition="SD", train=(), test=SUBJECTS, **kw):
    return E.ExperimentPlan(condition, ("story0",), train, test, "env", 2.0, **kw)


def test_si_overlap_rejected():
    with pytest.raises(PlanError, match="overlap"):
        _plan("SI", ("S00", "S01"), ("S01", "S02"))


@pytest.mark.parametrize("kwargs", [
    {"condition": "XX"}, {"feature_set": "pitch"}, {"stories": ()}, {"segment_length": 0.0},
    {"condition": "SI", "train_subjects": ()}, {"train_subjects": ("S00",)},
])
def test_plan_validation(kwargs):
    base = {"condition": "SD", "stories": ("story0",), "train_subjects": (), "test_subjects": SUBJECTS}
    with pytest.raises(PlanError):
        E.ExperimentPlan(**{**base, **kwargs})


def test_plan_dict_round_trip():
    plan = _plan("SI", ("S00",), ("S01",), hop=1.0)
    assert E.ExperimentPlan.from_dict(plan.to_dict()) == plan


def test_derive_seed_is_order_free():
    assert E.derive_seed(0, "S01") == E.derive_seed(0, "S01")
    assert E.derive_seed(0, "S01") != E.derive_seed(0, "S02")
    assert E.derive_seed(1, "S01") != E.derive_seed(0, "S01")


def test_forbidden_read_raises(store):
    store.forbid(["S03"])
    try:
        with pytest.raises(PlanError, match="held-out"):
            store.get("S03", "story0")
        store.get("S00", "story0")
    finally:
        store.allow_all()


def test_si_never_reads_test_subjects_while_training(store):
    store.access_log.clear()
    res = E.run(_plan("SI", ("S00", "S01"), ("S02", "S03")), store, FAST, eeg_channels=4)
    touched = [s for s, _ in store.access_log]
    last_train = max(i for i, s in enumerate(touched) if s in ("S00", "S01"))
    first_test = min(i for i, s in enumerate(touched) if s in ("S02", "S03"))
    assert last_train < first_test
    assert list(res.models) == ["SI"]
    assert sorted(res.report.per_subject("env", "SI")) == ["S02", "S03"]
    assert res.manifest["decisions"]["si_validation"]


def test_sd_one_model_per_subject(store):
    res = E.run(_plan(), store, FAST, eeg_channels=4)
    assert sorted(res.models) == list(SUBJECTS)
    assert len({id(m) for m in res.models.values()}) == 4
    assert sorted(res.report.per_subject("env", "SD")) == list(SUBJECTS)
    seeds = {info["seed"] for info in res.manifest["models"].values()}
    assert len(seeds) == 4


def test_sd_run_is_deterministic(store):
    a = E.run(_plan(test=("S00", "S01")), store, FAST, eeg_channels=4)
    b = E.run(_plan(test=("S00", "S01")), store, FAST, eeg_channels=4)
    assert a.manifest == b.manifest
    assert a.report.to_csv() == b.report.to_csv()
    for s in a.models:
        for k in a.models[s].params:
            assert a.models[s].params[k].data.tobytes() == b.models[s].params[k].data.tobytes()


def test_run_sd_rejects_si_plan(store):
    with pytest.raises(PlanError):
        E.run_sd(_plan("SI", ("S00",), ("S01",)), store, FAST)
    with pytest.raises(PlanError):
        E.run_si(_plan(), store, FAST)


def test_pairs_stay_inside_their_partition(store):
    pairs = E.build_pairs(store.get("S00", "story0"), _plan())
    bounds = {"train": [(0, 80), (120, 200)], "val": [(80, 100)], "test": [(100, 120)]}
    for part, plist in pairs.items():
        assert plist
        for p in plist:
            start = p.origin["start_time"]
            end = start + 2 * 2.0 + 1.0
            assert any(lo - 1e-9 <= start and end <= hi + 1e-9 for lo, hi in bounds[part]), (part, start)


def test_pair_windows_are_standardized(store):
    pairs = E.build_pairs(store.get("S00", "story0"), _plan())
    eeg = np.concatenate([p.eeg["envelope"] for p in pairs["test"]], axis=1)
    assert np.all(np.abs(eeg.mean(axis=1)) < 0.5)


def test_cohort_shares_stimulus_features(store):
    a, b = store.get("S00", "story0"), store.get("S01", "story0")
    assert a["envelope"].data.tobytes() == b["envelope"].data.tobytes()
    assert a["eeg_envelope"].data.tobytes() != b["eeg_envelope"].data.tobytes()


def test_directory_store(tmp_path, store):
    feats = store.get("S00", "story0")
    for k, s in feats.items():
        C.save_series(tmp_path / f"S00_story0.{k}.ntrk", s)
    ds = E.DirectoryStore(tmp_path)
    back = ds.get("S00", "story0")
    assert back["eeg_envelope"].data.tobytes() == feats["eeg_envelope"].data.tobytes()
    fp = ds.fingerprint("S00", "story0")
    assert set(fp) == set(E.SERIES_KEYS)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv(E.WORKERS_ENV, "3")
    assert E.worker_count() == 3
    monkeypatch.setenv(E.WORKERS_ENV, "zero")
    with pytest.raises(ArgumentError):
        E.worker_count()


def test_cohort_on_disk_matches_memory(tmp_path, store):
    disk = E.synthetic_cohort(2, SynthConfig(duration=200, n_channels=4, seed=20), dtype=np.float32,
                              out_dir=tmp_path)
    assert isinstance(disk, E.DirectoryStore)
    for k in E.SERIES_KEYS:
        assert disk.get("S01", "story0")[k].data.tobytes() == store.get("S01", "story0")[k].data.tobytes()
