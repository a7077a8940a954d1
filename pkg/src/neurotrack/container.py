"""Minimal binary tensor container with a JSON sidecar.

Layout of ``<name>.ntrk`` (all integers little-endian)::

    offset  size      field
    0       5         magic b"NTRK1"
    5       1         dtype code (u8, see DTYPE_CODES)
    6       1         rank r (u8)
    7       8 * r     dims (u64 each, C order)
    7+8r    ...       raw element bytes, little-endian, C order

The sidecar ``<name>.ntrk.json`` holds ``name``, ``fs``, ``units``,
``provenance``, ``checksum`` (CRC-32 of the raw element bytes, as 8 hex
digits), ``dtype``, ``shape``, ``tool_version`` and a free-form ``meta``.
Sidecars are written with sorted keys and no timestamps, so identical
inputs give byte-identical files. Every write goes through a temporary file
and an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError

MAGIC = b"NTRK1"
SUFFIX = ".ntrk"
DTYPE_CODES = {
    1: np.dtype("<u1"),
    2: np.dtype("<i4"),
    3: np.dtype("<i8"),
    4: np.dtype("<f4"),
    5: np.dtype("<f8"),
    6: np.dtype("bool"),
}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def crc32_hex(raw: bytes) -> str:
    return f"{zlib.crc32(raw) & 0xFFFFFFFF:08x}"


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n").encode()


def atomic_write_json(path, obj) -> None:
    atomic_write(path, dump_json(obj))


def encode(array) -> tuple[bytes, bytes]:
    """Return ``(file bytes, raw element bytes)`` for ``array``."""
    arr = np.asarray(array)
    dt = arr.dtype
    code = _CODE_OF.get(dt if dt.kind == "b" else dt.newbyteorder("<"))
    if code is None:
        raise DataError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise DataError("rank above 255")
    raw = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + raw, raw


def decode(blob: bytes, path="<bytes>") -> tuple[np.ndarray, bytes]:
    if len(blob) < 7 or blob[:5] != MAGIC:
        raise DataError(f"{path}: not an NTRK1 container (bad magic)")
    code, rank = struct.unpack_from("<BB", blob, 5)
    if code not in DTYPE_CODES:
        raise DataError(f"{path}: unknown dtype code {code}")
    start = 7 + 8 * rank
    if len(blob) < start:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", blob, 7)
    dtype = DTYPE_CODES[code]
    raw = blob[start:]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise DataError(
            f"{path}: payload has {len(raw)} bytes, dims {list(dims)} x {dtype.itemsize} need {expected}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy(), raw


def write_tensor(path, array, **sidecar) -> dict:
    """Write ``array`` and its sidecar; returns the sidecar dict.

    Sidecar fields default to ``name`` = file stem, ``fs`` = None,
    ``units`` = "a.u.", ``provenance`` = [] and ``meta`` = {}.
    """
    path = Path(path)
    blob, raw = encode(array)
    arr = np.asarray(array)
    side = {
        "name": sidecar.pop("name", path.name.removesuffix(SUFFIX)),
        "fs": sidecar.pop("fs", None),
        "units": sidecar.pop("units", "a.u."),
        "provenance": list(sidecar.pop("provenance", ())),
        "meta": sidecar.pop("meta", {}),
        **sidecar,
        "checksum": crc32_hex(raw),
        "dtype": str(DTYPE_CODES[blob[5]]),
        "shape": list(arr.shape),
        "tool_version": __version__,
    }
    atomic_write(path, blob)
    atomic_write_json(sidecar_path(path), side)
    return side


def read_sidecar(path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        raise DataError(f"{side}: sidecar missing")
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{side}: unreadable sidecar ({exc})") from None


def read_tensor(path, verify: bool = True) -> tuple[np.ndarray, dict]:
    """Read a container; with ``verify`` the CRC-32 must match the sidecar."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: container missing")
    arr, raw = decode(path.read_bytes(), path)
    side = read_sidecar(path)
    if verify:
        actual = crc32_hex(raw)
        if actual != side.get("checksum"):
            raise DataError(
                f"{path}: checksum mismatch (sidecar {side.get('checksum')}, data {actual})"
            )
        if list(arr.shape) != side.get("shape", list(arr.shape)):
            raise DataError(f"{path}: shape {list(arr.shape)} disagrees with sidecar {side['shape']}")
    return arr, side


# --------------------------------------------------------------------------
# Typed helpers
# --------------------------------------------------------------------------


def save_series(path, series, meta=None) -> dict:
    return write_tensor(
        path,
        series.data,
        name=series.name,
        fs=series.fs,
        units=series.units,
        provenance=series.provenance,
        t0=series.t0,
        meta={**series.meta, **(meta or {})},
    )


def load_series(path):
    from .series import FeatureSeries

    data, side = read_tensor(path)
    return FeatureSeries(
        side["name"], data, side["fs"], tuple(side["provenance"]), side.get("t0", 0.0),
        side["units"], side.get("meta", {}),
    )


def recording_paths(prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    return (prefix.with_name(prefix.name + ".eeg" + SUFFIX),
            prefix.with_name(prefix.name + ".stim" + SUFFIX))


def save_recording(prefix, rec) -> tuple[Path, Path]:
    eeg_path, stim_path = recording_paths(prefix)
    common = {
        "subject_id": rec.subject_id,
        "story_id": rec.story_id,
        "voice_class": rec.voice_class,
    }
    write_tensor(eeg_path, rec.eeg, name="eeg", fs=rec.eeg_fs, units="uV", meta=rec.meta, **common)
    write_tensor(stim_path, rec.stimulus, name="stimulus", fs=rec.stimulus_fs, **common)
    return eeg_path, stim_path


def load_recording(prefix):
    from .preprocess import Recording

    eeg_path, stim_path = recording_paths(prefix)
    eeg, es = read_tensor(eeg_path)
    stim, ss = read_tensor(stim_path)
    return Recording(
        eeg=eeg, eeg_fs=es["fs"], stimulus=stim, stimulus_fs=ss["fs"],
        subject_id=es["subject_id"], story_id=es["story_id"],
        voice_class=es["voice_class"], meta=es.get("meta", {}),
    )


def save_model(path, state, meta=None) -> dict:
    """Parameters as one flat vector; names, shapes and offsets in the sidecar."""
    layout, chunks, offset = [], [], 0
    for name, p in state.params.items():
        layout.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        chunks.append(p.data.ravel())
        offset += p.data.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    return write_tensor(
        path, flat, name="model", layout=layout, spec=state.spec.to_dict(), meta=meta or {},
    )


def load_model(path):
    from . import autodiff as ad
    from .model import ModelSpec, ModelState

    flat, side = read_tensor(path)
    if "layout" not in side or "spec" not in side:
        raise DataError(f"{path}: not a model container")
    state = ModelState(ModelSpec.from_dict(side["spec"]))
    for entry in side["layout"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        data = flat[entry["offset"] : entry["offset"] + n].reshape(entry["shape"])
        state.params[entry["name"]] = ad.Parameter(data, name=entry["name"])
    return state, side


def file_checksum(path) -> str:
    """CRC-32 of a file's full contents (used for input fingerprints)."""
    crc = 0
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            crc = zlib.crc32(chunk, crc)
    return f"{crc & 0xFFFFFFFF:08x}"
