import csv
import io
import json

import numpy as np
import pytest

from conftest import series
from neurotrack import model as M
from neurotrack import training as tr
from neurotrack.dataset import make_pairs
from neurotrack.errors import ArgumentError, NumericError

FS = 64


def _smooth(rng, n, cutoff=4.0):
    x = np.fft.irfft(np.fft.rfft(rng.standard_normal(n)) * (np.fft.rfftfreq(n, 1 / FS) < cutoff), n)
    return x / x.std()


def _pairs(seed, seconds=200, coupling=1.0, channels=4, noise=1.0):
    rng = np.random.default_rng(seed)
    n = seconds * FS
    stim = _smooth(rng, n)
    mix = rng.standard_normal((channels, 1))
    eeg = coupling * mix * stim + noise * rng.standard_normal((channels, n))
    return make_pairs({"envelope": series(eeg, FS, "envelope")}, {"envelope": series(stim, FS, "envelope")}, T=5)


def _model(seed=0, channels=4):
    return M.build_single(M.ENVELOPE_STREAM, eeg_channels=channels, seed=seed)


def _corr_scorer(sign):
    def score(inputs):
        eeg, m, mm = inputs["envelope"]
        e = eeg.mean(axis=1)
        cm = np.abs([np.corrcoef(a, b)[0, 1] for a, b in zip(e, m[:, 0])])
        cmm = np.abs([np.corrcoef(a, b)[0, 1] for a, b in zip(e, mm[:, 0])])
        p = np.where(sign * (cm - cmm) > 0, 1.0, 0.0)
        # Ordering (matched, mismatched) then (mismatched, matched).
        return p, 1.0 - p

    return score


@pytest.fixture(scope="module")
def clean_pairs():
    return _pairs(3, coupling=1.0, noise=0.2)


def test_oracle_scores_one(clean_pairs):
    assert tr.evaluate(_corr_scorer(+1), clean_pairs) == 1.0


def test_anti_oracle_scores_zero(clean_pairs):
    assert tr.evaluate(_corr_scorer(-1), clean_pairs) == 0.0


def test_label_flip_symmetry(clean_pairs):
    model = _model(1)
    p1, p2 = tr.score_pairs(model, clean_pairs)
    acc = tr.evaluate(model, clean_pairs)
    flipped = tr.evaluate(lambda inputs: tuple(1 - p for p in M.predict_arrays(model, inputs)), clean_pairs)
    assert not np.any(p1 == 0.5) and not np.any(p2 == 0.5)
    assert flipped == pytest.approx(1 - acc)


def test_empty_test_set():
    with pytest.raises(ArgumentError):
        tr.evaluate(_model(), [])


def test_empty_training_set(clean_pairs):
    with pytest.raises(ArgumentError):
        tr.train(_model(), [], clean_pairs, tr.TrainConfig(epochs=2, patience=1))


def test_config_validation():
    with pytest.raises(ArgumentError):
        tr.TrainConfig(epochs=0)
    with pytest.raises(ArgumentError):
        tr.TrainConfig(epochs=5, patience=5)
    with pytest.raises(ArgumentError):
        tr.TrainConfig(monitor="val_acc")
    with pytest.raises(ArgumentError):
        tr.TrainConfig(batch_size=63)


def test_learns_coupled_signal():
    # Held-out windows of the same recording: the spatial mixing must match.
    pairs = _pairs(4, seconds=400, coupling=1.0, noise=0.2)
    train_p, val_p, test_p = pairs[:40], pairs[44:52], pairs[56:]
    before = tr.evaluate(_model(2), test_p)
    trained, _ = tr.train(_model(2), train_p, val_p, tr.TrainConfig(epochs=15, patience=5, lr=3e-3))
    after = tr.evaluate(trained, test_p)
    assert after >= 0.9 and after > before


def test_random_labels_stay_near_chance():
    train_p = _pairs(5, coupling=0.0)
    test_p = _pairs(6, coupling=0.0, seconds=400)
    trained, _ = tr.train(_model(3), train_p[:30], train_p[30:], tr.TrainConfig(epochs=5, patience=2))
    assert 0.4 <= tr.evaluate(trained, test_p) <= 0.6


def test_best_epoch_weights_restored(clean_pairs):
    train_p, val_p = clean_pairs[:24], clean_pairs[24:30]
    trained, log = tr.train(_model(4), train_p, val_p, tr.TrainConfig(epochs=6, patience=5, lr=1e-2))
    losses = [r.val_loss for r in log.epochs]
    assert log.best_epoch == int(np.argmin(losses))
    val_loss, val_acc = tr.validation_metrics(trained, val_p)
    assert val_loss == pytest.approx(min(losses), rel=1e-12)
    assert val_acc == log.best.val_acc


def test_early_stopping_after_patience(clean_pairs):
    _, log = tr.train(_model(5), clean_pairs[:24], clean_pairs[24:30],
                      tr.TrainConfig(epochs=40, patience=1, lr=5e-2))
    if log.stopped_early:
        assert len(log.epochs) == log.best_epoch + 2
    else:
        assert len(log.epochs) == 40


def test_training_bitwise_deterministic(clean_pairs):
    cfg = tr.TrainConfig(epochs=2, patience=1, seed=7)
    a, la = tr.train(_model(6), clean_pairs[:24], clean_pairs[24:30], cfg)
    b, lb = tr.train(_model(6), clean_pairs[:24], clean_pairs[24:30], cfg)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    assert la.to_csv() == lb.to_csv()


def test_unpaired_batching_runs(clean_pairs):
    cfg = tr.TrainConfig(epochs=2, patience=1, pair_batching=False, batch_size=7)
    _, log = tr.train(_model(7), clean_pairs[:24], clean_pairs[24:30], cfg)
    assert len(log.epochs) == 2


def test_train_does_not_modify_input_model(clean_pairs):
    model = _model(8)
    before = model.weights()
    tr.train(model, clean_pairs[:8], clean_pairs[24:26], tr.TrainConfig(epochs=1, patience=0))
    for k, v in before.items():
        np.testing.assert_array_equal(model.params[k].data, v)


def test_nan_parameter_raises_naming_batch(clean_pairs):
    model = _model(9)
    model.params["head.b"].data[:] = np.nan
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        tr.train(model, clean_pairs[:8], clean_pairs[24:26], tr.TrainConfig(epochs=2, patience=1))


def test_log_csv_and_json(tmp_path, clean_pairs):
    _, log = tr.train(_model(10), clean_pairs[:8], clean_pairs[24:26], tr.TrainConfig(epochs=2, patience=1))
    rows = list(csv.DictReader(io.StringIO(log.to_csv())))
    assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "val_acc"]
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    assert "seconds" in log.to_csv(include_timing=True).splitlines()[0]
    log.write_json(tmp_path / "log.json", run="x")
    d = json.loads((tmp_path / "log.json").read_text())
    assert d["run"] == "x" and d["best_epoch"] == log.best_epoch and "seconds" not in d["epochs"][0]
