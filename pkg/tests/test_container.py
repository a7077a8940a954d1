import binascii
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from conftest import series
from neurotrack import container as C
from neurotrack import model as M
from neurotrack.errors import DataError
from neurotrack.synth import SynthConfig, generate


def test_header_layout_by_hand():
    blob, raw = C.encode(np.array([[1.0, 2.0, 3.0]], dtype="<f8"))
    expected = b"NTRK1" + bytes([5, 2]) + (1).to_bytes(8, "little") + (3).to_bytes(8, "little")
    assert blob[: len(expected)] == expected
    assert raw == np.array([1.0, 2.0, 3.0]).astype("<f8").tobytes()
    assert len(blob) == len(expected) + 24


def test_checksum_is_crc32():
    raw = b"neural tracking"
    assert C.crc32_hex(raw) == f"{binascii.crc32(raw):08x}"


@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.int32, np.int64, np.uint8, np.bool_]),
                  hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
@settings(max_examples=60, deadline=None)
def test_encode_decode_round_trip(arr):
    blob, _ = C.encode(arr)
    back, _ = C.decode(blob)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_big_endian_input_stored_little_endian():
    arr = np.arange(4, dtype=">f8")
    back, _ = C.decode(C.encode(arr)[0])
    np.testing.assert_array_equal(back, arr)
    assert back.dtype == np.dtype("<f8")


def test_unsupported_dtype():
    with pytest.raises(DataError):
        C.encode(np.zeros(2, dtype=np.complex128))


@pytest.mark.parametrize("blob", [b"XXXX1\x05\x00", b"NTRK1\x09\x00", b"NTRK1\x05\x02\x01"])
def test_decode_rejects_bad_headers(blob):
    with pytest.raises(DataError):
        C.decode(blob)


def test_decode_rejects_payload_length():
    blob, _ = C.encode(np.zeros(4))
    with pytest.raises(DataError, match="payload"):
        C.decode(blob[:-1])


def test_write_read_sidecar(tmp_path):
    path = tmp_path / "x.ntrk"
    side = C.write_tensor(path, np.ones((2, 3), dtype=np.float32), fs=64.0, units="uV", provenance=["a"])
    arr, back = C.read_tensor(path)
    assert back == side
    assert back["name"] == "x" and back["shape"] == [2, 3] and back["dtype"] == "float32"
    assert json.loads(C.sidecar_path(path).read_text())["checksum"] == C.crc32_hex(arr.tobytes())


def test_corruption_detected(tmp_path):
    path = tmp_path / "x.ntrk"
    C.write_tensor(path, np.arange(10.0))
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(DataError, match="checksum mismatch"):
        C.read_tensor(path)
    arr, _ = C.read_tensor(path, verify=False)
    assert arr.shape == (10,)


def test_missing_files(tmp_path):
    with pytest.raises(DataError, match="missing"):
        C.read_tensor(tmp_path / "none.ntrk")
    path = tmp_path / "x.ntrk"
    C.write_tensor(path, np.zeros(1))
    C.sidecar_path(path).unlink()
    with pytest.raises(DataError, match="sidecar missing"):
        C.read_tensor(path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    C.atomic_write(tmp_path / "sub" / "f.bin", b"abc")
    assert sorted(p.name for p in (tmp_path / "sub").iterdir()) == ["f.bin"]


def test_series_round_trip(tmp_path):
    s = series(np.random.default_rng(0).standard_normal((3, 50)), 64.0, "envelope")
    C.save_series(tmp_path / "s.ntrk", s, meta={"subject": "S01"})
    back = C.load_series(tmp_path / "s.ntrk")
    assert back.name == "envelope" and back.fs == 64.0
    assert back.meta["subject"] == "S01"
    assert back.data.tobytes() == s.data.tobytes()


def test_recording_round_trip(tmp_path):
    rec = generate(SynthConfig(duration=60, n_channels=2, seed=1))
    C.save_recording(tmp_path / "S01", rec)
    back = C.load_recording(tmp_path / "S01")
    assert back.eeg.tobytes() == rec.eeg.tobytes()
    assert back.stimulus.tobytes() == rec.stimulus.tobytes()
    assert (back.subject_id, back.story_id, back.voice_class) == (rec.subject_id, rec.story_id, "male")
    assert back.meta == json.loads(json.dumps(rec.meta))


def test_model_round_trip(tmp_path, rng):
    state = M.build_multi([M.ENVELOPE_STREAM, M.F0_STREAM], eeg_channels=3, seed=4)
    C.save_model(tmp_path / "m.ntrk", state, meta={"model_id": "env+f0"})
    back, side = C.load_model(tmp_path / "m.ntrk")
    assert side["meta"]["model_id"] == "env+f0"
    assert back.spec == state.spec
    assert list(back.params) == list(state.params)
    inputs = {
        "envelope": tuple(rng.standard_normal((2, c, 128)) for c in (3, 1, 1)),
        "f0": tuple(rng.standard_normal((2, c, 2048)) for c in (3, 1, 1)),
    }
    assert M.forward(back, inputs).data.tobytes() == M.forward(state, inputs).data.tobytes()


def test_load_model_rejects_plain_tensor(tmp_path):
    C.write_tensor(tmp_path / "x.ntrk", np.zeros(3))
    with pytest.raises(DataError, match="not a model"):
        C.load_model(tmp_path / "x.ntrk")


def test_writes_are_bitwise_reproducible(tmp_path):
    for d in ("a", "b"):
        C.write_tensor(tmp_path / d / "x.ntrk", np.linspace(0, 1, 7), meta={"k": [1, 2]})
    for name in ("x.ntrk", "x.ntrk.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
