"""Command-line interface.

Subcommands: ``synth``, ``preprocess``, ``segment``, ``train``, ``evaluate``,
``stats`` and ``inspect``. Exit codes: 0 ok, 1 usage error, 2 data error,
3 numeric failure. ``NEUROTRACK_WORKERS`` sets the worker-pool size.

Config files are JSON objects whose keys are the fields of the matching
dataclass (``SynthConfig``, ``PreprocessConfig``, ``TrainConfig``,
``ExperimentPlan``); command-line flags override them.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import container as ct
from .dataset import pair_index
from .errors import ArgumentError, DataError, NeurotrackError, ShapeError
from .experiment import (
    DirectoryStore,
    ExperimentPlan,
    FEATURE_SETS,
    SERIES_KEYS,
    build_pairs,
    derive_seed,
    run,
    worker_count,
)
from .preprocess import PreprocessConfig, bandpass_filter, preprocess_recording, stimulus_features
from .stats import EvalReport, comparison_rows
from .synth import SynthConfig, generate
from .training import TrainConfig, evaluate

log = logging.getLogger("neurotrack")


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ArgumentError(message)


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ArgumentError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ArgumentError(f"{path}: config must be a JSON object")
    return data


def _merge(cls, base: dict, overrides: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(base) - names
    if unknown:
        raise ArgumentError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    merged = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls.from_dict(merged) if hasattr(cls, "from_dict") else cls(**merged)
    except TypeError as exc:
        raise ArgumentError(str(exc)) from None


def _csv_list(text):
    return tuple(s for s in text.split(",") if s) if text else None


def _recording_keys(directory: Path) -> list[str]:
    return sorted(p.name[: -len(".eeg.ntrk")] for p in directory.glob("*.eeg.ntrk"))


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    base = _merge(SynthConfig, _load_json(args.config), {
        "duration": args.duration, "n_channels": args.channels, "snr_db": args.snr,
        "env_gain": args.env_gain, "f0_gain": args.f0_gain, "voice_class": args.voice,
    })
    if args.subjects < 0 or args.stories < 0:
        raise ArgumentError("subject and story counts must be >= 0")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for j in range(args.stories):
        story = f"story{j}"
        for i in range(args.subjects):
            subject = f"S{i:02d}"
            cfg = replace(
                base, subject_id=subject, story_id=story,
                seed=derive_seed(args.seed, subject),
                story_seed=derive_seed(args.seed, story),
                trf_seed=args.seed,
            )
            rec = generate(cfg)
            eeg_path, stim_path = ct.save_recording(out / f"{subject}_{story}", rec)
            entries.append({
                "key": f"{subject}_{story}", "subject": subject, "story": story,
                "eeg": ct.file_checksum(eeg_path), "stimulus": ct.file_checksum(stim_path),
            })
            log.info("wrote %s_%s", subject, story)
    ct.atomic_write_json(out / "manifest.json", {
        "tool_version": __version__, "seed": args.seed, "config": base.to_dict(),
        "recordings": entries,
    })
    print(f"synth: {len(entries)} recordings in {out}")
    return 0


# --------------------------------------------------------------------------
# preprocess
# --------------------------------------------------------------------------


def _preprocess_one(job):
    src, out, key, config, fingerprint = job
    rec = ct.load_recording(src / key)
    stim = stimulus_features(rec.stimulus, rec.stimulus_fs, rec.f0_band, config)
    feats = preprocess_recording(rec, config, stimulus=stim)
    meta = {"subject": rec.subject_id, "story": rec.story_id, "voice_class": rec.voice_class,
            "preprocess_config": config.to_dict()}
    for name, series in feats.items():
        ct.save_series(out / f"{key}.{name}.ntrk", series, meta=meta)
    filters = {
        "envelope": bandpass_filter(config.envelope_band, config.f0_fs, config).to_dict(),
        "f0": bandpass_filter(rec.f0_band.as_tuple(), config.f0_fs, config).to_dict(),
    }
    ct.atomic_write_json(out / f"{key}.state.json", {
        "fingerprint": fingerprint,
        "outputs": {n: ct.file_checksum(out / f"{key}.{n}.ntrk") for n in SERIES_KEYS},
        "filters": filters,
    })
    return key


def _is_current(out: Path, key: str, fingerprint: dict) -> bool:
    state_path = out / f"{key}.state.json"
    if not state_path.exists():
        return False
    state = json.loads(state_path.read_text())
    if state.get("fingerprint") != fingerprint:
        return False
    for name, crc in state.get("outputs", {}).items():
        path = out / f"{key}.{name}.ntrk"
        if not path.exists() or ct.file_checksum(path) != crc:
            return False
    return True


def cmd_preprocess(args) -> int:
    src, out = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise DataError(f"{src}: input directory not found")
    config = _merge(PreprocessConfig, _load_json(args.config), {"expected_channels": args.channels})
    out.mkdir(parents=True, exist_ok=True)
    keys = _recording_keys(src)
    config_json = json.dumps(config.to_dict(), sort_keys=True)
    jobs, skipped = [], []
    for key in keys:
        eeg_path, stim_path = ct.recording_paths(src / key)
        for p in (eeg_path, stim_path):
            ct.read_tensor(p)  # verifies checksums; corrupt input fails here
        fingerprint = {
            "eeg": ct.file_checksum(eeg_path),
            "stimulus": ct.file_checksum(stim_path),
            "config": ct.crc32_hex(config_json.encode()),
            "tool_version": __version__,
        }
        if _is_current(out, key, fingerprint):
            skipped.append(key)
        else:
            jobs.append((src, out, key, config, fingerprint))
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_preprocess_one, jobs))
    else:
        done = [_preprocess_one(j) for j in jobs]
    ct.atomic_write_json(out / "preprocess.json", {
        "tool_version": __version__, "config": config.to_dict(), "recordings": keys,
    })
    print(f"preprocess: computed {len(done)}, skipped {len(skipped)} (unchanged)")
    return 0


# --------------------------------------------------------------------------
# segment
# --------------------------------------------------------------------------


def _subjects_stories(features: Path):
    keys = sorted(p.name[: -len(".state.json")] for p in features.glob("*.state.json"))
    pairs = []
    for key in keys:
        side = ct.read_sidecar(features / f"{key}.envelope.ntrk")
        pairs.append((side["meta"]["subject"], side["meta"]["story"]))
    return pairs


def cmd_segment(args) -> int:
    features = Path(args.features)
    plan = ExperimentPlan("SD", ("all",), (), ("all",), args.feature_set, args.T, args.hop, args.offset)
    store = DirectoryStore(features)
    index = {}
    for subject, story in _subjects_stories(features):
        parts = build_pairs(store.get(subject, story), plan, {"subject": subject, "story": story})
        index[f"{subject}_{story}"] = {
            part: pair_index(pairs, f"{subject}_{story}") for part, pairs in parts.items()
        }
    ct.atomic_write_json(Path(args.out), {
        "tool_version": __version__, "segment_length": args.T, "hop": args.hop,
        "offset": args.offset, "feature_set": args.feature_set, "recordings": index,
    })
    n = sum(len(v) for parts in index.values() for v in parts.values())
    print(f"segment: {n} pairs from {len(index)} recordings")
    return 0


# --------------------------------------------------------------------------
# train / evaluate
# --------------------------------------------------------------------------


def _plan_from_args(args, features: Path) -> ExperimentPlan:
    base = _load_json(args.plan)
    known = sorted({s for s, _ in _subjects_stories(features)})
    stories = sorted({t for _, t in _subjects_stories(features)})
    overrides = {
        "condition": args.condition,
        "feature_set": args.feature_set,
        "segment_length": args.T,
        "stories": _csv_list(args.stories),
        "train_subjects": _csv_list(args.train_subjects),
        "test_subjects": _csv_list(args.test_subjects),
    }
    merged = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    merged.setdefault("condition", "SD")
    merged.setdefault("stories", stories)
    merged.setdefault("train_subjects", ())
    if merged["condition"] == "SD":
        merged.setdefault("test_subjects", known)
    elif "test_subjects" not in merged:
        raise ArgumentError("SI plans need --test-subjects")
    if merged["condition"] == "SI" and not merged["train_subjects"]:
        held = set(merged["test_subjects"])
        merged["train_subjects"] = [s for s in known if s not in held]
    return ExperimentPlan.from_dict(merged)


def _eeg_channels(features: Path) -> int:
    for path in sorted(features.glob("*.eeg_envelope.ntrk")):
        return ct.read_sidecar(path)["shape"][0]
    raise DataError(f"{features}: no preprocessed features found")


def cmd_train(args) -> int:
    features, out = Path(args.features), Path(args.out)
    plan = _plan_from_args(args, features)
    config = _merge(TrainConfig, _load_json(args.train_config), {
        "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
        "patience": args.patience, "dtype": args.dtype, "seed": args.seed,
    })
    store = DirectoryStore(features)
    channels = _eeg_channels(features)
    tic = time.perf_counter()
    result = run(plan, store, config, eeg_channels=channels)
    elapsed = time.perf_counter() - tic
    resolved = {"plan": plan.to_dict(), "train_config": config.to_dict()}
    for name, state in result.models.items():
        ct.save_model(out / "models" / f"{name}.ntrk", state, meta={"model_id": name, **resolved})
        logbook = result.logs[name]
        logbook.write_csv(out / "logs" / f"{name}.csv")
        logbook.write_json(out / "logs" / f"{name}.json", tool_version=__version__, **resolved)
    # Wall-clock numbers live apart from the deterministic artifacts.
    ct.atomic_write_json(out / "timing.json", {
        "total_seconds": elapsed,
        "epochs": {n: [r.seconds for r in lg.epochs] for n, lg in result.logs.items()},
    })
    ct.atomic_write_json(out / "manifest.json", result.manifest)
    result.report.meta.update(tool_version=__version__, **resolved)
    _write_report(out, result.report)
    print(f"train: {len(result.models)} model(s) -> {out / 'models'}")
    return 0


def _write_report(out: Path, report: EvalReport, comparisons=()):
    out.mkdir(parents=True, exist_ok=True)
    ct.atomic_write(out / "report.csv", report.to_csv().encode())
    ct.atomic_write(out / "report.json", (report.to_json() + "\n").encode())
    ct.atomic_write(out / "significance.txt", report.significance_table(comparisons).encode())
    if comparisons:
        rows = comparison_rows(report, comparisons)
        lines = ["a,b,test,statistic,p,p_one_sided,direction,stars,n"]
        for r in rows:
            lines.append(",".join(str(r[k]) for k in
                                  ("a", "b", "test", "statistic", "p", "p_one_sided", "direction", "stars", "n")))
        ct.atomic_write(out / "comparisons.csv", ("\n".join(lines) + "\n").encode())


def _check_rates(state, features: dict):
    from .experiment import EEG_KEY

    for stream in state.spec.streams:
        for key in (stream.feature, EEG_KEY[stream.feature]):
            fs = features[key].fs
            if abs(fs - stream.fs) > 1e-9:
                raise ShapeError(
                    f"model stream {stream.feature!r} expects {stream.fs:g} Hz but feature "
                    f"{key!r} is sampled at {fs:g} Hz"
                )


def evaluate_run(run_dir: Path, store: DirectoryStore) -> EvalReport:
    manifest = json.loads((run_dir / "manifest.json").read_text())
    plan = ExperimentPlan.from_dict(manifest["plan"])
    report = EvalReport(meta={"condition": plan.condition, "feature_set": plan.feature_set,
                              "segment_length": plan.segment_length})
    for model_id in sorted(manifest["models"]):
        state, _ = ct.load_model(run_dir / "models" / f"{model_id}.ntrk")
        dtype = state.params["head.w"].data.dtype
        subjects = [model_id] if plan.condition == "SD" else list(plan.test_subjects)
        for subject in subjects:
            for story in plan.stories:
                feats = store.get(subject, story)
                _check_rates(state, feats)
                test = build_pairs(feats, plan, {"subject": subject, "story": story}, dtype)["test"]
                report.add(subject, story, plan.feature_set, plan.condition, plan.segment_length,
                           evaluate(state, test), 2 * len(test))
    return report


def cmd_evaluate(args) -> int:
    store = DirectoryStore(args.features)
    report = EvalReport()
    for run_dir in args.models:
        part = evaluate_run(Path(run_dir), store)
        for r in part.rows:
            report.add(*(r[k] for k in ("subject", "story", "model", "condition",
                                        "segment_length", "accuracy", "n_decisions")))
    groups = report.groups()
    comparisons = [(a, b) for i, a in enumerate(groups) for b in groups[i + 1:]]
    report.meta = {"tool_version": __version__, "runs": [Path(r).name for r in args.models]}
    _write_report(Path(args.out), report, comparisons)
    print(report.significance_table(comparisons), end="")
    return 0


# --------------------------------------------------------------------------
# stats / inspect
# --------------------------------------------------------------------------


def _group(text: str) -> tuple[str, str]:
    model, _, cond = text.partition("/")
    if not cond:
        raise ArgumentError(f"groups are written MODEL/CONDITION, got {text!r}")
    return model, cond


def cmd_stats(args) -> int:
    report = EvalReport()
    for path in args.reports:
        try:
            part = EvalReport.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise DataError(f"{path}: report not found") from None
        for r in part.rows:
            report.add(*(r[k] for k in ("subject", "story", "model", "condition",
                                        "segment_length", "accuracy", "n_decisions")))
    comparisons = [(_group(a), _group(b)) for a, b in (args.compare or [])]
    text = report.significance_table(comparisons)
    if args.out:
        ct.atomic_write(Path(args.out), text.encode())
    print(text, end="")
    return 0


def cmd_inspect(args) -> int:
    if args.filter:
        lo, hi = args.filter
        filt = bandpass_filter((lo, hi), args.fs, PreprocessConfig())
        print(json.dumps(filt.to_dict(), indent=1, sort_keys=True))
        return 0
    if not args.path:
        raise ArgumentError("inspect needs a container path or --filter LOW HIGH")
    data, side = ct.read_tensor(args.path)
    summary = {k: v for k, v in side.items() if k not in ("layout",)}
    summary["checksum_ok"] = True
    if data.size and np.issubdtype(data.dtype, np.number):
        summary["min"] = float(data.min())
        summary["max"] = float(data.max())
    if "layout" in side:
        summary["n_parameters"] = int(data.size)
    print(json.dumps(summary, indent=1, sort_keys=True, default=str))
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> Parser:
    p = Parser(prog="neurotrack", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"neurotrack {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate synthetic recordings")
    sp.add_argument("--out", required=True)
    sp.add_argument("--subjects", type=int, default=2)
    sp.add_argument("--stories", type=int, default=1)
    sp.add_argument("--config")
    sp.add_argument("--duration", type=float)
    sp.add_argument("--channels", type=int)
    sp.add_argument("--snr", type=float, help="dB; omit for noise-free")
    sp.add_argument("--env-gain", type=float)
    sp.add_argument("--f0-gain", type=float)
    sp.add_argument("--voice", choices=("male", "female"))

    sp = add("preprocess", cmd_preprocess, "extract features and preprocess EEG")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--channels", type=int, help="expected EEG channel count")

    sp = add("segment", cmd_segment, "index match-mismatch pairs")
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--T", type=float, default=5.0)
    sp.add_argument("--hop", type=float)
    sp.add_argument("--offset", type=float, default=1.0)
    sp.add_argument("--feature-set", choices=sorted(FEATURE_SETS), default="env")

    sp = add("train", cmd_train, "train SD or SI models")
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--plan")
    sp.add_argument("--train-config")
    sp.add_argument("--condition", choices=("SD", "SI"))
    sp.add_argument("--feature-set", choices=sorted(FEATURE_SETS))
    sp.add_argument("--T", type=float)
    sp.add_argument("--stories")
    sp.add_argument("--train-subjects")
    sp.add_argument("--test-subjects")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--dtype", choices=("float64", "float32"))

    sp = add("evaluate", cmd_evaluate, "evaluate trained runs and compare them")
    sp.add_argument("--features", required=True)
    sp.add_argument("--models", nargs="+", required=True, help="train output directories")
    sp.add_argument("--out", required=True)

    sp = add("stats", cmd_stats, "significance table from report JSON files")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--compare", nargs=2, action="append", metavar=("A", "B"),
                    help="groups as MODEL/CONDITION, e.g. env/SD env+f0/SD")
    sp.add_argument("--out")

    sp = add("inspect", cmd_inspect, "show a container's sidecar or a filter design")
    sp.add_argument("path", nargs="?")
    sp.add_argument("--filter", nargs=2, type=float, metavar=("LOW", "HIGH"))
    sp.add_argument("--fs", type=float, default=1024.0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except NeurotrackError as exc:
        print(f"neurotrack: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"neurotrack: numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
