import numpy as np
import pytest

from neurotrack.series import FeatureSeries


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(freq, fs, n, amp=1.0, phase=0.0):
    t = np.arange(n) / fs
    return amp * np.sin(2 * np.pi * freq * t + phase)


def steady_gain(sos, freqs, fs, settle, n_fit=4096):
    """Time-domain gain of ``sos`` at each frequency, by least-squares sinusoid
    fit after the transient has died out."""
    import scipy.signal

    freqs = np.asarray(freqs, dtype=float)
    n = settle + n_fit
    t = np.arange(n) / fs
    x = np.sin(2 * np.pi * freqs[:, None] * t)
    y = scipy.signal.sosfilt(sos, x, axis=-1)[:, settle:]
    tt = t[settle:]
    gains = np.empty(len(freqs))
    for i, f in enumerate(freqs):
        basis = np.stack([np.sin(2 * np.pi * f * tt), np.cos(2 * np.pi * f * tt)], axis=1)
        coef, *_ = np.linalg.lstsq(basis, y[i], rcond=None)
        gains[i] = np.hypot(*coef)
    return gains


def series(data, fs, name="x"):
    return FeatureSeries(name, np.asarray(data, dtype=float), fs)
