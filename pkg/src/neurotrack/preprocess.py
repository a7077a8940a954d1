"""From raw recordings to aligned feature series.

Speech side: the power-law sub-band envelope (64 Hz) and the f0 band
(1024 Hz). EEG side: downsampling, artifact removal, average reference and
the same band-pass as the stimulus feature it is paired with.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from . import dsp
from .errors import ArgumentError
from .series import FeatureSeries

log = logging.getLogger(__name__)

VOICE_CLASSES = ("male", "female")


@dataclass(frozen=True)
class F0Band:
    f_low: float
    f_high: float

    @classmethod
    def for_voice(cls, voice_class: str) -> "F0Band":
        if voice_class == "male":
            return cls(75.0, 175.0)
        if voice_class == "female":
            return cls(120.0, 300.0)
        raise ArgumentError(f"voice_class must be one of {VOICE_CLASSES}, got {voice_class!r}")

    def as_tuple(self) -> tuple[float, float]:
        return (self.f_low, self.f_high)


@dataclass(frozen=True)
class PreprocessConfig:
    n_bands: int = 28
    gammatone_f_min: float = 50.0
    gammatone_f_max: float = 5000.0
    power: float = 0.6
    envelope_band: tuple[float, float] = (1.0, 40.0)
    envelope_fs: float = 64.0
    f0_fs: float = 1024.0
    stop_atten: float = 80.0
    passband_tol: float = 1.0
    artifact_threshold: float = 5.0  # robust standard deviations
    artifact_dilation: float = 0.1  # seconds, each side
    expected_channels: int | None = 64

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        d = dict(d)
        if "envelope_band" in d:
            d["envelope_band"] = tuple(d["envelope_band"])
        return cls(**d)


@dataclass(frozen=True)
class Recording:
    """One subject listening to one story.

    ``eeg`` has shape ``(channels, samples)`` at ``eeg_fs``; ``stimulus`` is
    the mono waveform at ``stimulus_fs``.
    """

    eeg: np.ndarray
    eeg_fs: float
    stimulus: np.ndarray
    stimulus_fs: float
    subject_id: str
    story_id: str
    voice_class: str = "male"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        eeg = np.asarray(self.eeg)
        stim = np.asarray(self.stimulus)
        if eeg.ndim != 2:
            raise ArgumentError(f"eeg must be (channels, samples), got {eeg.shape}")
        if stim.ndim != 1:
            raise ArgumentError(f"stimulus must be 1-D, got {stim.shape}")
        if self.voice_class not in VOICE_CLASSES:
            raise ArgumentError(f"unknown voice_class {self.voice_class!r}")
        if abs(self.eeg_duration - stim.size / self.stimulus_fs) > 0.5:
            raise ArgumentError(
                f"EEG ({self.eeg_duration:.2f} s) and stimulus "
                f"({stim.size / self.stimulus_fs:.2f} s) durations differ by more than 0.5 s"
            )
        object.__setattr__(self, "eeg", eeg)
        object.__setattr__(self, "stimulus", stim)

    @property
    def eeg_duration(self) -> float:
        return np.asarray(self.eeg).shape[1] / self.eeg_fs

    @property
    def key(self) -> str:
        return f"{self.subject_id}_{self.story_id}"

    @property
    def f0_band(self) -> F0Band:
        return F0Band.for_voice(self.voice_class)

    def eeg_series(self) -> FeatureSeries:
        return FeatureSeries("eeg", self.eeg, self.eeg_fs, units="uV")

    def stimulus_series(self) -> FeatureSeries:
        return FeatureSeries("stimulus", self.stimulus, self.stimulus_fs)


_filter_cache: dict = {}


def bandpass_filter(band, fs: float, config: PreprocessConfig = PreprocessConfig()) -> dsp.IirFilter:
    """Chebyshev-II band-pass used for every feature/EEG band (memoized)."""
    key = (tuple(band), fs, config.stop_atten, config.passband_tol)
    if key not in _filter_cache:
        _filter_cache[key] = dsp.design_cheby2_bandpass(
            band[0], band[1], fs, config.stop_atten, config.passband_tol
        )
    return _filter_cache[key]


def powerlaw_subband_envelope(
    stimulus, fs_in: float, config: PreprocessConfig = PreprocessConfig()
) -> FeatureSeries:
    """Mean over gammatone sub-bands of ``|s_k(t)| ** power`` at the native rate.

    This is the tap point before any band-pass filtering, so the result is
    non-negative.
    """
    x = np.asarray(stimulus, dtype=float).ravel()
    if x.size == 0:
        raise ArgumentError("stimulus is empty")
    if fs_in < 8000:
        raise ArgumentError(f"stimulus sample rate must be >= 8000 Hz, got {fs_in}")
    # The upper edge must stay below Nyquist for low-rate stimuli.
    f_max = min(config.gammatone_f_max, 0.45 * fs_in)
    bank = dsp.gammatone_bank(fs_in, config.n_bands, config.gammatone_f_min, f_max)
    acc = np.zeros_like(x)
    if np.any(x):
        for band in bank.bands(x):
            acc += np.abs(band) ** config.power
        acc /= bank.n_bands
    return FeatureSeries(
        "envelope",
        acc,
        fs_in,
        provenance=(f"gammatone[{bank.n_bands}x{config.gammatone_f_min:g}-{f_max:g}Hz]",
                    f"powerlaw[{config.power:g}]", "mean_bands"),
    )


def extract_envelope(
    stimulus, fs_in: float, config: PreprocessConfig = PreprocessConfig()
) -> FeatureSeries:
    """Speech envelope: power-law sub-band average, band-passed, at 64 Hz.

    The band-pass runs at the intermediate f0 rate (1024 Hz) because its
    upper edge lies above the Nyquist frequency of the final rate.
    """
    raw = powerlaw_subband_envelope(stimulus, fs_in, config)
    mid = dsp.resample(raw, config.f0_fs)
    mid = dsp.filtfilt(bandpass_filter(config.envelope_band, mid.fs, config), mid)
    return dsp.resample(mid, config.envelope_fs)


def extract_f0_band(
    stimulus, fs_in: float, band: F0Band, config: PreprocessConfig = PreprocessConfig()
) -> FeatureSeries:
    """Stimulus resampled to 1024 Hz and band-passed to the narrator's f0 range.

    Unvoiced and silent stretches are deliberately left unmasked.
    """
    if band.f_high >= config.f0_fs / 2:
        raise ArgumentError(f"f0 band {band} does not fit below {config.f0_fs / 2} Hz")
    x = FeatureSeries("f0", np.asarray(stimulus, dtype=float).ravel(), fs_in)
    x = dsp.resample(x, config.f0_fs)
    return dsp.filtfilt(bandpass_filter(band.as_tuple(), x.fs, config), x)


def detect_artifacts(
    eeg: FeatureSeries, threshold: float = 5.0, dilation: float = 0.1
) -> np.ndarray:
    """Flag samples where any channel deviates more than ``threshold`` robust
    standard deviations (1.4826 * MAD) from its median; flags are widened by
    ``dilation`` seconds on each side."""
    if eeg.duration < 1.0:
        raise ArgumentError(f"artifact detection needs >= 1 s of data, got {eeg.duration:.3f} s")
    x = eeg.data
    med = np.median(x, axis=1, keepdims=True)
    dev = np.abs(x - med)
    sigma = 1.4826 * np.median(dev, axis=1, keepdims=True)
    hits = np.any((dev > threshold * sigma) & (sigma > 0), axis=0)
    if not hits.any():
        return hits
    half = int(round(dilation * eeg.fs))
    if half > 0:
        hits = scipy.ndimage.binary_dilation(hits, structure=np.ones(2 * half + 1, dtype=bool))
    return hits


def average_reference(eeg: FeatureSeries) -> FeatureSeries:
    return eeg.derive(eeg.data - eeg.data.mean(axis=0, keepdims=True), step="avg_ref")


def preprocess_eeg(
    eeg: FeatureSeries,
    target: str,
    band: F0Band | tuple[float, float] | None = None,
    config: PreprocessConfig = PreprocessConfig(),
) -> FeatureSeries:
    """EEG pipeline for one stimulus feature.

    Resample to 1024 Hz, remove artifacts with the multichannel Wiener filter,
    re-reference to the channel average, band-pass like the paired feature
    and, for the envelope target, resample to 64 Hz.

    Parameters
    ----------
    eeg : FeatureSeries
        Raw EEG at its native rate.
    target : {"envelope", "f0"}
    band : F0Band or (low, high), optional
        Band for the f0 target. Defaults to ``config.envelope_band`` for the
        envelope target; required for f0.
    """
    if target not in ("envelope", "f0"):
        raise ArgumentError(f"target must be 'envelope' or 'f0', got {target!r}")
    if config.expected_channels is not None and eeg.n_channels != config.expected_channels:
        raise ArgumentError(
            f"expected {config.expected_channels} EEG channels, got {eeg.n_channels}"
        )
    if band is None:
        if target == "f0":
            raise ArgumentError("the f0 target needs an explicit band")
        band = config.envelope_band
    band = band.as_tuple() if isinstance(band, F0Band) else tuple(band)

    x = eeg_frontend(eeg, config)
    return _eeg_band_stage(x, target, band, config)


def eeg_frontend(eeg: FeatureSeries, config: PreprocessConfig = PreprocessConfig()) -> FeatureSeries:
    """Target-independent EEG steps: resample, artifact removal, re-reference."""
    x = dsp.resample(eeg, config.f0_fs)
    mask = detect_artifacts(x, config.artifact_threshold, config.artifact_dilation)
    frac = float(mask.mean())
    if 0.01 <= frac <= 0.5 and x.n_channels >= 2:
        x = dsp.mwf_denoise(x, mask)
    else:
        log.debug("MWF skipped: %.2f%% of samples flagged", 100 * frac)
        x = x.derive(step=f"mwf[skipped:{100 * frac:.2f}%]")
    return average_reference(x)


def _eeg_band_stage(x: FeatureSeries, target: str, band, config: PreprocessConfig) -> FeatureSeries:
    x = dsp.filtfilt(bandpass_filter(band, x.fs, config), x)
    if target == "envelope":
        x = dsp.resample(x, config.envelope_fs)
    return x.derive(name=f"eeg_{target}")


def stimulus_features(
    stimulus, fs_in: float, band: F0Band, config: PreprocessConfig = PreprocessConfig()
) -> dict[str, FeatureSeries]:
    """Envelope and f0-band series of one stimulus waveform."""
    return {
        "envelope": extract_envelope(stimulus, fs_in, config),
        "f0": extract_f0_band(stimulus, fs_in, band, config),
    }


def preprocess_recording(
    rec: Recording, config: PreprocessConfig = PreprocessConfig(), stimulus: dict | None = None
) -> dict[str, FeatureSeries]:
    """All four series for one recording: stimulus envelope and f0 band, plus
    the EEG prepared for each.

    ``stimulus`` may pass precomputed :func:`stimulus_features` for
    recordings that share a story.
    """
    band = rec.f0_band
    eeg = rec.eeg_series()
    if config.expected_channels is not None and eeg.n_channels != config.expected_channels:
        raise ArgumentError(f"expected {config.expected_channels} EEG channels, got {eeg.n_channels}")
    out = dict(stimulus) if stimulus is not None else stimulus_features(
        rec.stimulus, rec.stimulus_fs, band, config
    )
    front = eeg_frontend(eeg, config)
    out["eeg_envelope"] = _eeg_band_stage(front, "envelope", config.envelope_band, config)
    out["eeg_f0"] = _eeg_band_stage(front, "f0", band.as_tuple(), config)
    # Stimulus and EEG may differ by < 0.5 s; trim each rate to the shorter.
    for stim_key, eeg_key in (("envelope", "eeg_envelope"), ("f0", "eeg_f0")):
        n = min(out[stim_key].n_samples, out[eeg_key].n_samples)
        for key in (stim_key, eeg_key):
            s = out[key]
            if s.n_samples != n:
                out[key] = s.derive(s.data[:, :n], step=f"trim[{n}]")
    return out
