"""Synthetic recordings with a known stimulus-to-EEG coupling.

The stimulus is a harmonic "voice": a positive modulation below 8 Hz times a
pulse-train-like harmonic carrier whose fundamental wanders slowly around
``f0_hz``. Every EEG channel is the sum of two convolutions, one of the
modulation with a slow kernel (support within the envelope model's receptive
field) and one of the carrier's fundamental component with a fast kernel
(support within the f0 model's receptive field), plus optional noise and
blink-like artifacts.

Three seeds separate what may be shared: ``story_seed`` fixes the stimulus,
``trf_seed`` the population kernels, and ``seed`` the subject's deviation
from them, the noise and the artifacts.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.signal

from . import dsp
from .errors import ArgumentError
from .preprocess import F0Band, Recording

ENV_RATE = 64.0
F0_RATE = 1024.0
ENV_RF_SAMPLES = 27
F0_RF_SAMPLES = 37


@dataclass(frozen=True)
class SynthConfig:
    duration: float = 600.0
    n_channels: int = 64
    stimulus_fs: float = 8192.0
    eeg_fs: float = 1024.0
    f0_hz: float = 120.0
    f0_jitter: float = 0.15  # relative half-range of the f0 contour
    modulation_cutoff: float = 8.0
    env_trf_samples: int = 26  # at 64 Hz
    f0_trf_samples: int = 32  # at 1024 Hz
    env_gain: float = 1.0
    f0_gain: float = 1.0
    snr_db: float = math.inf
    pink_noise: bool = False
    artifact_rate: float = 0.0  # blinks per minute
    trf_variability: float = 0.3  # subject deviation from the population kernels
    voice_class: str = "male"
    seed: int = 0
    story_seed: int | None = None
    trf_seed: int | None = None
    subject_id: str = "S00"
    story_id: str = "story0"

    def __post_init__(self):
        if self.duration < 60:
            raise ArgumentError(f"duration must be >= 60 s, got {self.duration}")
        if self.n_channels < 1:
            raise ArgumentError("need at least one EEG channel")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ArgumentError("snr_db must be a number or +inf (noise-free)")
        if self.stimulus_fs < 8000 or self.eeg_fs < 2 * 300:
            raise ArgumentError("stimulus_fs must be >= 8000 Hz and eeg_fs >= 600 Hz")
        if not 1 <= self.env_trf_samples <= ENV_RF_SAMPLES:
            raise ArgumentError(f"env_trf_samples must be in [1, {ENV_RF_SAMPLES}]")
        if not 1 <= self.f0_trf_samples <= F0_RF_SAMPLES:
            raise ArgumentError(f"f0_trf_samples must be in [1, {F0_RF_SAMPLES}]")
        band = F0Band.for_voice(self.voice_class)
        lo, hi = self.f0_range
        if lo - self.modulation_cutoff < band.f_low or hi + self.modulation_cutoff > band.f_high:
            raise ArgumentError(
                f"f0 contour {lo:.0f}-{hi:.0f} Hz (+/- {self.modulation_cutoff} Hz modulation) "
                f"leaves the {self.voice_class} band {band.as_tuple()}"
            )

    @property
    def f0_range(self) -> tuple[float, float]:
        return self.f0_hz * (1 - self.f0_jitter), self.f0_hz * (1 + self.f0_jitter)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db"] = None if math.isinf(self.snr_db) else self.snr_db
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if d.get("snr_db", 0) is None:
            d["snr_db"] = math.inf
        return cls(**d)


@dataclass
class SynthTruth:
    """Ground truth behind one synthetic recording (stimulus-rate signals)."""

    modulation: np.ndarray
    f0_component: np.ndarray
    f0_contour: np.ndarray
    env_trf: np.ndarray  # (channels, taps) at eeg_fs
    f0_trf: np.ndarray  # (channels, taps) at eeg_fs
    fs: float
    meta: dict = field(default_factory=dict)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def _lowpass_noise(rng, n: int, fs: float, f_lo: float, f_hi: float) -> np.ndarray:
    """Unit-variance Gaussian noise with an ideal (FFT-mask) pass band."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(freqs < f_lo) | (freqs > f_hi)] = 0.0
    x = np.fft.irfft(spec, n)
    return x / x.std()


def make_stimulus(config: SynthConfig):
    """Return ``(stimulus, modulation, f0_component, f0_contour)`` at ``stimulus_fs``.

    Arrays are read-only and shared between configs describing the same story.
    """
    seed = config.seed if config.story_seed is None else config.story_seed
    return _story(seed, config.duration, config.stimulus_fs, config.f0_hz, config.f0_jitter,
                  config.modulation_cutoff)


@functools.lru_cache(maxsize=2)
def _story(seed, duration, fs, f0_hz, f0_jitter, modulation_cutoff):
    rng = _rng(seed, 1)
    n = int(round(duration * fs))
    z = _lowpass_noise(rng, n, fs, 0.5, modulation_cutoff)
    # A constant offset keeps the modulation positive without widening its band.
    modulation = z - z.min() + 0.1
    modulation /= modulation.mean()
    c = _lowpass_noise(rng, n, fs, 0.0, 2.0)
    contour = f0_hz * (1.0 + f0_jitter * c / np.abs(c).max())
    phase = 2 * np.pi * np.cumsum(contour) / fs + rng.uniform(0, 2 * np.pi)
    carrier = np.zeros(n)
    f_top = 0.45 * fs
    k = 1
    while k * contour.max() < f_top and k <= 64:
        carrier += np.sin(k * phase) / k
        k += 1
    fundamental = modulation * np.sin(phase)
    stimulus = modulation * carrier
    stimulus /= np.sqrt(np.mean(stimulus**2))
    out = (stimulus, modulation, fundamental, contour)
    for a in out:
        a.setflags(write=False)
    return out


def _bump(t, mu, sigma):
    return np.exp(-0.5 * ((t - mu) / sigma) ** 2)


def make_trfs(config: SynthConfig):
    """Per-channel envelope and f0 kernels sampled at ``eeg_fs``.

    The population shape comes from ``trf_seed``; each subject's channel
    weights deviate from it by ``trf_variability`` (seeded by ``seed``).
    """
    pop_seed = config.seed if config.trf_seed is None else config.trf_seed
    pop = _rng(pop_seed, 2)
    subj = _rng(config.seed, 3)
    fs = config.eeg_fs
    c = config.n_channels

    env_support = config.env_trf_samples / ENV_RATE
    t = np.arange(int(math.floor(env_support * fs))) / fs
    mus = np.array([0.06, 0.12, 0.22]) * env_support / 0.4 + pop.uniform(-0.01, 0.01, 3)
    sigmas = np.array([0.015, 0.025, 0.04]) * env_support / 0.4
    shapes = np.stack([_bump(t, m, s) for m, s in zip(mus, sigmas)])
    w = pop.standard_normal((c, 3))
    w = w + config.trf_variability * subj.standard_normal((c, 3))
    env_trf = w @ shapes

    f0_support = config.f0_trf_samples / F0_RATE
    t = np.arange(int(math.floor(f0_support * fs))) / fs
    lat = np.array([0.3, 0.65]) * f0_support + pop.uniform(-0.001, 0.001, 2)
    shapes = np.stack([_bump(t, m, 0.001) for m in lat])
    w = pop.standard_normal((c, 2))
    w = w + config.trf_variability * subj.standard_normal((c, 2))
    f0_trf = w @ shapes
    return env_trf, f0_trf


def _convolve_rows(source: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    return scipy.signal.fftconvolve(source[None, :], kernels, axes=1)[:, : source.size]


def _colored_noise(rng, shape, pink: bool) -> np.ndarray:
    x = rng.standard_normal(shape)
    if not pink:
        return x
    spec = np.fft.rfft(x, axis=-1)
    f = np.arange(spec.shape[-1], dtype=float)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), shape[-1], axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def _add_artifacts(rng, eeg: np.ndarray, fs: float, rate: float, scale: float):
    n_events = rng.poisson(rate * eeg.shape[1] / fs / 60.0)
    pattern = np.abs(rng.standard_normal(eeg.shape[0]))
    t = np.arange(int(0.4 * fs)) / fs
    blink = 20 * scale * np.exp(-0.5 * ((t - 0.2) / 0.05) ** 2)
    for start in rng.integers(0, eeg.shape[1] - blink.size, n_events):
        eeg[:, start : start + blink.size] += pattern[:, None] * blink


def generate_with_truth(config: SynthConfig) -> tuple[Recording, SynthTruth]:
    stimulus, modulation, fundamental, contour = make_stimulus(config)
    env_trf, f0_trf = make_trfs(config)
    fs_eeg = config.eeg_fs
    n_eeg = int(round(config.duration * fs_eeg))

    def at_eeg_rate(x):
        y = dsp.resample_array(x, config.stimulus_fs, fs_eeg)
        return y[:n_eeg]

    env_part = _convolve_rows(at_eeg_rate(modulation - modulation.mean()), env_trf)
    f0_part = _convolve_rows(at_eeg_rate(fundamental), f0_trf)
    env_part *= config.env_gain / np.sqrt(np.mean(env_part**2))
    f0_part *= config.f0_gain / np.sqrt(np.mean(f0_part**2))
    eeg = env_part + f0_part

    rng = _rng(config.seed, 4)
    signal_power = float(np.mean(eeg**2))
    if signal_power == 0.0:
        signal_power = 2.0  # coupling off: noise at the level of unit-gain components
    if math.isfinite(config.snr_db):
        sd = math.sqrt(signal_power / 10 ** (config.snr_db / 10))
        eeg += sd * _colored_noise(rng, eeg.shape, config.pink_noise)
    if config.artifact_rate > 0:
        _add_artifacts(rng, eeg, fs_eeg, config.artifact_rate, math.sqrt(signal_power))

    rec = Recording(
        eeg=eeg,
        eeg_fs=fs_eeg,
        stimulus=stimulus,
        stimulus_fs=config.stimulus_fs,
        subject_id=config.subject_id,
        story_id=config.story_id,
        voice_class=config.voice_class,
        meta={"synth": config.to_dict()},
    )
    truth = SynthTruth(modulation, fundamental, contour, env_trf, f0_trf, config.stimulus_fs)
    return rec, truth


def generate(config: SynthConfig) -> Recording:
    """Deterministic synthetic :class:`Recording` for ``config``."""
    return generate_with_truth(config)[0]
