"""Match-mismatch segment pairs, recording splits and batching.

A pair holds, per feature, an EEG window, the time-aligned stimulus window
and a mismatched stimulus window starting ``offset`` seconds after the
matched one ends. Windows are numpy views into the source series, so pairs
are cheap; arrays are only copied when a batch is collated.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .errors import ArgumentError
from .series import FeatureSeries

PARTITIONS = ("train", "val", "test")


@dataclass(frozen=True)
class SplitSpec:
    """Partition intervals as fractions of the recording duration."""

    train: tuple[tuple[float, float], ...] = ((0.0, 0.4), (0.6, 1.0))
    val: tuple[tuple[float, float], ...] = ((0.4, 0.5),)
    test: tuple[tuple[float, float], ...] = ((0.5, 0.6),)

    def __post_init__(self):
        intervals = sorted(iv for part in PARTITIONS for iv in getattr(self, part))
        edge = 0.0
        for lo, hi in intervals:
            if not lo < hi:
                raise ArgumentError(f"empty or reversed split interval ({lo}, {hi})")
            if not math.isclose(lo, edge, abs_tol=1e-12):
                raise ArgumentError("split intervals must be disjoint and cover [0, 1]")
            edge = hi
        if not math.isclose(edge, 1.0, abs_tol=1e-12):
            raise ArgumentError("split intervals must cover [0, 1]")

    def to_dict(self) -> dict:
        return {p: [list(iv) for iv in getattr(self, p)] for p in PARTITIONS}


def _cut(series: FeatureSeries, lo: float, hi: float) -> FeatureSeries:
    n = series.n_samples
    # Round toward the interval interior so neighbouring partitions never share a sample.
    start = math.ceil(lo * n - 1e-9)
    stop = math.floor(hi * n + 1e-9)
    return series.derive(
        series.data[:, start:stop],
        step=f"split[{lo:g}-{hi:g}]",
        t0=series.t0 + start / series.fs,
    )


def split_recording(
    series: Mapping[str, FeatureSeries],
    spec: SplitSpec = SplitSpec(),
    segment_length: float | None = None,
) -> dict[str, list[dict[str, FeatureSeries]]]:
    """Cut every series of one recording into train/val/test portions.

    Returns ``{partition: [portion, ...]}`` where each portion maps series
    names to the same absolute time span (the default train partition has two
    portions). Pairs are built per portion so none crosses a boundary.
    """
    if not series:
        raise ArgumentError("no series to split")
    durations = [s.duration for s in series.values()]
    coarsest = min(s.fs for s in series.values())
    if max(durations) - min(durations) > 1.0 / coarsest + 1e-9:
        raise ArgumentError(f"series cover different time spans: {durations}")
    if segment_length is not None and min(durations) < 10 * segment_length:
        warnings.warn(
            f"recording of {min(durations):.1f} s is shorter than 10 segments of {segment_length} s",
            stacklevel=2,
        )
    out = {}
    for part in PARTITIONS:
        out[part] = [
            {name: _cut(s, lo, hi) for name, s in series.items()} for lo, hi in getattr(spec, part)
        ]
    return out


@dataclass(frozen=True)
class SegmentPair:
    """EEG, matched and mismatched windows for one or more features.

    Each mapping is keyed by feature name; arrays are ``(channels, samples)``.
    ``origin`` records subject, story, absolute start time and per-feature
    start samples.
    """

    eeg: dict
    matched: dict
    mismatched: dict
    duration: float
    origin: dict = field(default_factory=dict)

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(self.matched)


def _as_mapping(x) -> dict[str, FeatureSeries]:
    if isinstance(x, FeatureSeries):
        return {x.name: x}
    return dict(x)


def make_pairs(
    eeg,
    stim,
    T: float,
    hop: float | None = None,
    offset: float = 1.0,
    origin: dict | None = None,
) -> list[SegmentPair]:
    """Build match-mismatch pairs from aligned EEG and stimulus series.

    ``eeg`` and ``stim`` are either single :class:`FeatureSeries` or mappings
    ``feature -> series`` with the same keys. Pairs start at ``t0, t0 + hop, ...`` and
    are kept while the mismatched window still fits in every series.
    """
    if T <= 0 or offset < 0:
        raise ArgumentError(f"need T > 0 and offset >= 0, got T={T}, offset={offset}")
    hop = T if hop is None else hop
    if hop <= 0:
        raise ArgumentError(f"hop must be positive, got {hop}")
    if isinstance(stim, FeatureSeries):
        stims = {stim.name: stim}
        eegs = {stim.name: eeg}
    else:
        stims = dict(stim)
        eegs = _as_mapping(eeg)
        if set(eegs) != set(stims):
            raise ArgumentError(f"EEG features {sorted(eegs)} != stimulus features {sorted(stims)}")
    for name, s in stims.items():
        e = eegs[name]
        if not math.isclose(e.fs, s.fs) or abs(e.t0 - s.t0) > 0.5 / s.fs:
            raise ArgumentError(f"EEG and stimulus for {name!r} are not aligned")

    t_start = max(s.t0 for s in stims.values())
    geometry = {}
    for name, s in stims.items():
        n = min(s.n_samples, eegs[name].n_samples)
        geometry[name] = (s.fs, s.t0, n, round(T * s.fs), round(offset * s.fs))

    origin = dict(origin or {})
    pairs = []
    k = 0
    while True:
        t = t_start + k * hop
        starts = {}
        for name, (fs, t0, n, length, off) in geometry.items():
            i = int(round((t - t0) * fs))
            if i + 2 * length + off > n:
                return pairs
            starts[name] = i
        e_w, m_w, mm_w = {}, {}, {}
        for name, i in starts.items():
            fs, t0, n, length, off = geometry[name]
            j = i + length + off
            e_w[name] = eegs[name].data[:, i : i + length]
            m_w[name] = stims[name].data[:, i : i + length]
            mm_w[name] = stims[name].data[:, j : j + length]
        pairs.append(
            SegmentPair(
                eeg=e_w,
                matched=m_w,
                mismatched=mm_w,
                duration=T,
                origin={**origin, "start_time": t, "start_samples": starts},
            )
        )
        k += 1


@dataclass(frozen=True)
class Example:
    """One training example; ``label == 1`` means slot A holds the match."""

    pair: SegmentPair
    label: int

    @property
    def slot_a(self) -> dict:
        return self.pair.matched if self.label == 1 else self.pair.mismatched

    @property
    def slot_b(self) -> dict:
        return self.pair.mismatched if self.label == 1 else self.pair.matched


def alternate_labels(pairs: list[SegmentPair]) -> list[Example]:
    """Present every pair twice, once with the match in each slot."""
    if not pairs:
        raise ArgumentError("need at least one pair")
    out = []
    for p in pairs:
        out.append(Example(p, 1))
        out.append(Example(p, 0))
    return out


def epoch_rng(seed: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))


def batch(examples: list, size: int, seed: int, epoch: int = 0) -> Iterator[list]:
    """Yield shuffled batches; the order is a pure function of (seed, epoch)."""
    if size < 1:
        raise ArgumentError(f"batch size must be >= 1, got {size}")
    order = epoch_rng(seed, epoch).permutation(len(examples))
    for i in range(0, len(order), size):
        yield [examples[j] for j in order[i : i + size]]


def collate(examples: list[Example], dtype=np.float64) -> tuple[dict, np.ndarray]:
    """Stack a batch into ``{feature: (eeg, slot_a, slot_b)}`` arrays plus labels."""
    features = examples[0].pair.features
    inputs = {}
    for f in features:
        eeg = np.stack([ex.pair.eeg[f] for ex in examples]).astype(dtype, copy=False)
        a = np.stack([ex.slot_a[f] for ex in examples]).astype(dtype, copy=False)
        b = np.stack([ex.slot_b[f] for ex in examples]).astype(dtype, copy=False)
        inputs[f] = (eeg, a, b)
    labels = np.array([ex.label for ex in examples], dtype=dtype)
    return inputs, labels


def collate_pairs(pairs: list[SegmentPair], dtype=np.float64) -> dict:
    """Stack pairs as ``{feature: (eeg, matched, mismatched)}``."""
    inputs = {}
    for f in pairs[0].features:
        inputs[f] = tuple(
            np.stack([getattr(p, part)[f] for p in pairs]).astype(dtype, copy=False)
            for part in ("eeg", "matched", "mismatched")
        )
    return inputs


def standardize(series: FeatureSeries) -> FeatureSeries:
    """Per-channel z-score; constant channels are only centred."""
    x = series.data
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    std[std == 0] = 1.0
    return series.derive((x - mean) / std, step="zscore")


def pair_index(examples_or_pairs, recording: str | None = None) -> list[dict]:
    """JSON-ready index: recording, per-feature start samples and label slot."""
    rows = []
    for item in examples_or_pairs:
        pair, label = (item.pair, item.label) if isinstance(item, Example) else (item, None)
        origin = pair.origin
        rows.append(
            {
                "recording": recording or origin.get("recording"),
                "start_time": origin.get("start_time"),
                "start_samples": origin.get("start_samples"),
                "match_slot": None if label is None else ("A" if label == 1 else "B"),
            }
        )
    return rows


def write_index(path, examples_or_pairs, recording: str | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(pair_index(examples_or_pairs, recording), fh, indent=1, sort_keys=True)
