"""Subject-dependent (SD) and subject-independent (SI) experiment harness."""

from __future__ import annotations

import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .container import file_checksum, load_series
from .dataset import SplitSpec, make_pairs, split_recording, standardize
from .errors import ArgumentError, DataError, PlanError
from .model import ENVELOPE_STREAM, F0_STREAM, ModelState, build_multi, with_segment
from .stats import EvalReport
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

FEATURE_SETS = {"env": ("envelope",), "f0": ("f0",), "env+f0": ("envelope", "f0")}
EEG_KEY = {"envelope": "eeg_envelope", "f0": "eeg_f0"}
STREAMS = {"envelope": ENVELOPE_STREAM, "f0": F0_STREAM}
SERIES_KEYS = ("envelope", "f0", "eeg_envelope", "eeg_f0")
WORKERS_ENV = "NEUROTRACK_WORKERS"

DECISIONS = {
    "early_stopping": "monitor validation loss, restore best epoch",
    "si_validation": "training subjects' validation portions",
    "si_test": "held-out subjects' test portions (same windows as SD)",
    "normalization": "per-channel z-score of every split portion",
}


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ArgumentError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass(frozen=True)
class ExperimentPlan:
    """What to train and on whom.

    For SD, every subject in ``test_subjects`` gets its own model trained on
    its own split; ``train_subjects`` must be empty or identical. For SI one
    model is trained on ``train_subjects`` and tested on the disjoint
    ``test_subjects``.
    """

    condition: str
    stories: tuple[str, ...]
    train_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]
    feature_set: str = "env"
    segment_length: float = 5.0
    hop: float | None = None
    mismatch_offset: float = 1.0
    split: SplitSpec = SplitSpec()

    def __post_init__(self):
        for name in ("stories", "train_subjects", "test_subjects"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.condition not in ("SD", "SI"):
            raise PlanError(f"condition must be 'SD' or 'SI', got {self.condition!r}")
        if self.feature_set not in FEATURE_SETS:
            raise PlanError(f"feature_set must be one of {sorted(FEATURE_SETS)}, got {self.feature_set!r}")
        if not self.stories:
            raise PlanError("plan has no stories")
        if self.segment_length <= 0:
            raise PlanError("segment_length must be positive")
        if self.condition == "SI":
            if not self.train_subjects or not self.test_subjects:
                raise PlanError("SI needs non-empty training and test subject sets")
            overlap = sorted(set(self.train_subjects) & set(self.test_subjects))
            if overlap:
                raise PlanError(f"SI training and test subjects overlap: {overlap}")
        elif self.train_subjects and self.train_subjects != self.test_subjects:
            raise PlanError("SD trains and tests every subject on itself; train_subjects must match")

    @property
    def features(self) -> tuple[str, ...]:
        return FEATURE_SETS[self.feature_set]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = self.split.to_dict()
        for k in ("stories", "train_subjects", "test_subjects"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        if "split" in d:
            d["split"] = SplitSpec(**{k: tuple(tuple(iv) for iv in v) for k, v in d["split"].items()})
        return cls(**d)


# --------------------------------------------------------------------------
# Feature stores with access logging
# --------------------------------------------------------------------------


class FeatureStore:
    """Preprocessed series per (subject, story), with an access log.

    ``forbid(subjects)`` makes any later read of those subjects raise
    :class:`PlanError` until ``allow_all()`` is called.
    """

    def __init__(self):
        self.access_log: list[tuple[str, str]] = []
        self._forbidden: frozenset = frozenset()

    def forbid(self, subjects):
        self._forbidden = frozenset(subjects)

    def allow_all(self):
        self._forbidden = frozenset()

    def get(self, subject: str, story: str) -> dict:
        if subject in self._forbidden:
            raise PlanError(f"read of held-out subject {subject!r} during training")
        self.access_log.append((subject, story))
        return self._load(subject, story)

    def _load(self, subject, story) -> dict:
        raise NotImplementedError

    def fingerprint(self, subject: str, story: str) -> dict:
        return {}


class MemoryStore(FeatureStore):
    def __init__(self, features: dict):
        super().__init__()
        self.features = features  # {(subject, story): {key: FeatureSeries}}

    def _load(self, subject, story):
        try:
            return self.features[subject, story]
        except KeyError:
            raise DataError(f"no features for subject {subject!r}, story {story!r}") from None


class DirectoryStore(FeatureStore):
    """Reads ``<root>/<subject>_<story>.<key>.ntrk`` containers."""

    def __init__(self, root):
        super().__init__()
        self.root = Path(root)

    def path(self, subject, story, key) -> Path:
        return self.root / f"{subject}_{story}.{key}.ntrk"

    def _load(self, subject, story):
        return {k: load_series(self.path(subject, story, k)) for k in SERIES_KEYS}

    def fingerprint(self, subject, story):
        return {k: file_checksum(self.path(subject, story, k)) for k in SERIES_KEYS}


# --------------------------------------------------------------------------
# Pairs and models
# --------------------------------------------------------------------------


def _zscore(series, dtype):
    z = standardize(series)
    return z.derive(z.data.astype(dtype, copy=False))


def build_pairs(features: dict, plan: ExperimentPlan, origin: dict | None = None, dtype=np.float64):
    """``{partition: [SegmentPair]}`` for one recording's preprocessed series.

    Every split portion is z-scored per channel on its own before pairs are
    cut, so no statistic leaks across partitions.
    """
    series = {}
    for f in plan.features:
        series[f"eeg:{f}"] = features[EEG_KEY[f]]
        series[f"stim:{f}"] = features[f]
    parts = split_recording(series, plan.split, plan.segment_length)
    out = {}
    for part, portions in parts.items():
        pairs = []
        for portion in portions:
            z = {k: _zscore(v, dtype) for k, v in portion.items()}
            pairs += make_pairs(
                {f: z[f"eeg:{f}"] for f in plan.features},
                {f: z[f"stim:{f}"] for f in plan.features},
                plan.segment_length,
                plan.hop,
                plan.mismatch_offset,
                origin={**(origin or {}), "partition": part},
            )
        out[part] = pairs
    return out


def build_model(feature_set: str, eeg_channels: int, seed: int, segment_length=None, dtype=np.float64):
    streams = [STREAMS[f] for f in FEATURE_SETS[feature_set]]
    if segment_length is not None:
        streams = [with_segment(s, segment_length) for s in streams]
    return build_multi(streams, eeg_channels=eeg_channels, seed=seed, dtype=dtype)


def derive_seed(base: int, label: str) -> int:
    """Per-model seed that does not depend on iteration order."""
    return zlib.crc32(f"{base}:{label}".encode()) & 0x7FFFFFFF


@dataclass
class RunResult:
    models: dict[str, ModelState] = field(default_factory=dict)
    logs: dict = field(default_factory=dict)
    report: EvalReport = field(default_factory=EvalReport)
    manifest: dict = field(default_factory=dict)


def _manifest(plan, config, eeg_channels, store, subjects):
    return {
        "tool_version": __version__,
        "plan": plan.to_dict(),
        "train_config": config.to_dict(),
        "eeg_channels": eeg_channels,
        "decisions": DECISIONS,
        "inputs": {
            f"{s}_{t}": store.fingerprint(s, t) for s in subjects for t in plan.stories
        },
        "models": {},
    }


def _train_subject(plan, store, subject, config, eeg_channels):
    dtype = np.dtype(config.dtype)
    pooled = {"train": [], "val": []}
    tests = {}
    for story in plan.stories:
        pairs = build_pairs(store.get(subject, story), plan, {"subject": subject, "story": story}, dtype)
        pooled["train"] += pairs["train"]
        pooled["val"] += pairs["val"]
        tests[story] = pairs["test"]
    seed = derive_seed(config.seed, subject)
    model = build_model(plan.feature_set, eeg_channels, seed, plan.segment_length, dtype)
    state, logbook = train(model, pooled["train"], pooled["val"], replace(config, seed=seed))
    accs = {story: (evaluate(state, p), 2 * len(p)) for story, p in tests.items()}
    info = {
        "seed": seed,
        "best_epoch": logbook.best_epoch,
        "epochs_run": len(logbook.epochs),
        "n_train_pairs": len(pooled["train"]),
        "n_val_pairs": len(pooled["val"]),
    }
    return state, logbook, accs, info


def _sd_job(args):
    return _train_subject(*args)


def run_sd(plan: ExperimentPlan, store: FeatureStore, config: TrainConfig = TrainConfig(),
           eeg_channels: int = 64, workers: int | None = None) -> RunResult:
    """One model per subject on that subject's own train/val/test split."""
    if plan.condition != "SD":
        raise PlanError("run_sd needs an SD plan")
    workers = worker_count() if workers is None else workers
    subjects = list(plan.test_subjects)
    result = RunResult(manifest=_manifest(plan, config, eeg_channels, store, subjects))
    jobs = [(plan, store, s, config, eeg_channels) for s in subjects]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_sd_job, jobs))
    else:
        outputs = [_sd_job(j) for j in jobs]
    model_id = f"{plan.feature_set}"
    for subject, (state, logbook, accs, info) in zip(subjects, outputs):
        result.models[subject] = state
        result.logs[subject] = logbook
        result.manifest["models"][subject] = info
        for story, (acc, n) in accs.items():
            result.report.add(subject, story, model_id, "SD", plan.segment_length, acc, n)
    result.report.meta = {"condition": "SD", "feature_set": plan.feature_set,
                          "segment_length": plan.segment_length}
    return result


def run_si(plan: ExperimentPlan, store: FeatureStore, config: TrainConfig = TrainConfig(),
           eeg_channels: int = 64) -> RunResult:
    """One model on the training subjects, evaluated on held-out subjects.

    Held-out subjects are locked out of the store while training runs.
    """
    if plan.condition != "SI":
        raise PlanError("run_si needs an SI plan")
    dtype = np.dtype(config.dtype)
    subjects = list(plan.train_subjects) + list(plan.test_subjects)
    result = RunResult(manifest=_manifest(plan, config, eeg_channels, store, subjects))
    pooled = {"train": [], "val": []}
    store.forbid(plan.test_subjects)
    try:
        for subject in plan.train_subjects:
            for story in plan.stories:
                pairs = build_pairs(store.get(subject, story), plan,
                                    {"subject": subject, "story": story}, dtype)
                pooled["train"] += pairs["train"]
                pooled["val"] += pairs["val"]
        seed = derive_seed(config.seed, "SI")
        model = build_model(plan.feature_set, eeg_channels, seed, plan.segment_length, dtype)
        state, logbook = train(model, pooled["train"], pooled["val"], replace(config, seed=seed))
    finally:
        store.allow_all()
    del pooled
    result.models["SI"] = state
    result.logs["SI"] = logbook
    result.manifest["models"]["SI"] = {
        "seed": seed, "best_epoch": logbook.best_epoch, "epochs_run": len(logbook.epochs),
    }
    for subject in plan.test_subjects:
        for story in plan.stories:
            test = build_pairs(store.get(subject, story), plan,
                               {"subject": subject, "story": story}, dtype)["test"]
            result.report.add(subject, story, plan.feature_set, "SI", plan.segment_length,
                              evaluate(state, test), 2 * len(test))
    result.report.meta = {"condition": "SI", "feature_set": plan.feature_set,
                          "segment_length": plan.segment_length}
    return result


def run(plan: ExperimentPlan, store: FeatureStore, config: TrainConfig = TrainConfig(),
        eeg_channels: int = 64) -> RunResult:
    if plan.condition == "SD":
        return run_sd(plan, store, config, eeg_channels)
    return run_si(plan, store, config, eeg_channels)


def preprocess_cohort(recordings, config=None, dtype=np.float64, out_dir=None) -> FeatureStore:
    """Preprocess recordings into a :class:`MemoryStore`, or into containers
    under ``out_dir`` behind a :class:`DirectoryStore`.

    ``recordings`` may be a generator; only one raw recording is alive at a
    time. Stimulus features are computed once per distinct stimulus
    waveform, so subjects who heard the same story share them.
    """
    from .container import save_series
    from .preprocess import PreprocessConfig, preprocess_recording, stimulus_features

    config = config or PreprocessConfig()
    stim_cache = {}
    features = {}
    for rec in recordings:
        key = (zlib.crc32(np.ascontiguousarray(rec.stimulus).tobytes()), rec.stimulus_fs, rec.voice_class)
        if key not in stim_cache:
            stim_cache[key] = stimulus_features(rec.stimulus, rec.stimulus_fs, rec.f0_band, config)
        out = preprocess_recording(rec, config, stimulus=stim_cache[key])
        out = {k: v.derive(v.data.astype(dtype, copy=False)) for k, v in out.items()}
        if out_dir is None:
            features[rec.subject_id, rec.story_id] = out
        else:
            for k, v in out.items():
                save_series(Path(out_dir) / f"{rec.subject_id}_{rec.story_id}.{k}.ntrk", v,
                            meta={"subject": rec.subject_id, "story": rec.story_id})
        del rec, out
    return MemoryStore(features) if out_dir is None else DirectoryStore(out_dir)


def synthetic_cohort(n_subjects: int, base=None, stories=("story0",), config=None, dtype=np.float64,
                     out_dir=None) -> FeatureStore:
    """Generate and preprocess ``n_subjects`` synthetic subjects per story.

    Subject ``i`` uses ``seed = base.seed + i``; all subjects share the
    story's stimulus (``story_seed``) and the population kernels
    (``trf_seed``) of ``base``. With ``out_dir`` the features are written
    to disk and read back on demand, which bounds memory for large cohorts.
    """
    from .preprocess import PreprocessConfig
    from .synth import SynthConfig, generate

    base = base or SynthConfig()
    config = config or PreprocessConfig(expected_channels=base.n_channels)
    trf_seed = base.seed if base.trf_seed is None else base.trf_seed

    def recordings():
        for j, story in enumerate(stories):
            story_seed = (base.seed if base.story_seed is None else base.story_seed) + 1000 * j
            for i in range(n_subjects):
                yield generate(replace(base, seed=base.seed + i, subject_id=f"S{i:02d}", story_id=story,
                                       story_seed=story_seed, trf_seed=trf_seed))

    return preprocess_cohort(recordings(), config, dtype, out_dir)
