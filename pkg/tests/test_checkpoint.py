"""Checkpoint format tests: round trips, corruption, stage guards."""

import struct
import zlib

import numpy as np
import pytest

from gazedistill.checkpoint import (
    MAGIC,
    VERSION,
    CheckpointMeta,
    check_tensor_names,
    load_checkpoint,
    require_config_hash,
    require_stage,
    save_checkpoint,
)
from gazedistill.errors import ConfigError, FormatError
from gazedistill.student import StudentConfig, init_student_params

META = CheckpointMeta(stage="teacher", seed=11, config_hash="ab12" * 8)


def _params(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "blk.w": rng.normal(size=(4, 3)).astype(np.float32),
        "blk.b": rng.normal(size=(4,)).astype(np.float32),
        "head.w": rng.normal(size=(2, 4, 3, 3)).astype(np.float32),
    }


def read_oracle(blob):
    """Independent parse of the byte layout, no shared code."""
    assert blob[:4] == MAGIC
    version, count = struct.unpack_from("<II", blob, 4)
    off = 12
    out = {}
    order = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        rank = blob[off]
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = 4 * int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(blob[off : off + n], dtype="<f4").reshape(shape)
        order.append(name)
        off += n
    (crc,) = struct.unpack_from("<Q", blob, off)
    assert off + 8 == len(blob)
    return version, out, order, crc


def write_oracle(tensors, stage, seed, config_hash):
    """Independent writer following only the documented layout."""
    full = dict(tensors)
    full["__meta.stage"] = np.frombuffer(stage.encode(), np.uint8).astype("<f4")
    full["__meta.seed"] = np.frombuffer(str(seed).encode(), np.uint8).astype("<f4")
    full["__meta.config"] = np.frombuffer(config_hash.encode(), np.uint8).astype("<f4")
    body = b""
    crc = 0
    for name in sorted(full):
        data = np.ascontiguousarray(full[name], dtype="<f4")
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb)) + nb + struct.pack("<B", data.ndim)
        body += struct.pack(f"<{data.ndim}I", *data.shape)
        raw = data.tobytes()
        crc = zlib.crc32(raw, crc)
        body += raw
    return MAGIC + struct.pack("<II", VERSION, len(full)) + body + struct.pack("<Q", crc)


class TestRoundTrip:
    def test_bitwise_float32(self, tmp_path):
        path = tmp_path / "ck.gzlt"
        params = _params()
        save_checkpoint(path, params, META)
        loaded, meta = load_checkpoint(path)
        assert set(loaded) == set(params)
        for name, want in params.items():
            assert loaded[name].dtype == np.float32
            assert np.array_equal(loaded[name], want)
        assert meta == META

    def test_float64_input_narrows(self, tmp_path):
        path = tmp_path / "ck.gzlt"
        arr = np.array([[0.1, 0.2], [0.3, 0.4]])
        save_checkpoint(path, {"w": arr}, META)
        loaded, _ = load_checkpoint(path)
        assert np.array_equal(loaded["w"], arr.astype(np.float32))

    def test_accepts_live_parameter_tensors(self, tmp_path):
        cfg = StudentConfig(n_classes=2, stages=2, base_channels=4, distill_dim=8, seed=3)
        params = init_student_params(cfg, in_channels=1)
        path = tmp_path / "student.gzlt"
        save_checkpoint(path, params, CheckpointMeta("student", 3, "c" * 64))
        loaded, meta = load_checkpoint(path)
        check_tensor_names(loaded, params.keys())
        for name, p in params.items():
            assert np.array_equal(loaded[name], np.asarray(p.data, dtype=np.float32))
        assert meta.stage == "student"

    def test_insertion_order_does_not_matter(self, tmp_path):
        params = _params()
        reordered = {k: params[k] for k in reversed(list(params))}
        a, b = tmp_path / "a.gzlt", tmp_path / "b.gzlt"
        save_checkpoint(a, params, META)
        save_checkpoint(b, reordered, META)
        assert a.read_bytes() == b.read_bytes()

    def test_scalar_and_empty_shapes(self, tmp_path):
        path = tmp_path / "ck.gzlt"
        params = {"s": np.float32(2.5), "e": np.zeros((0, 3), dtype=np.float32)}
        save_checkpoint(path, params, META)
        loaded, _ = load_checkpoint(path)
        assert loaded["s"].shape == ()
        assert loaded["s"] == np.float32(2.5)
        assert loaded["e"].shape == (0, 3)


class TestLayoutOracles:
    def test_written_bytes_parse_with_independent_reader(self, tmp_path):
        path = tmp_path / "ck.gzlt"
        params = _params()
        save_checkpoint(path, params, META)
        version, out, order, crc = read_oracle(path.read_bytes())
        assert version == VERSION
        assert order == sorted(out)
        for name, want in params.items():
            assert np.array_equal(out[name], want)
        payload = b"".join(
            np.ascontiguousarray(out[n], dtype="<f4").tobytes() for n in order
        )
        assert crc == zlib.crc32(payload)

    def test_independent_writer_loads(self, tmp_path):
        params = _params(seed=5)
        blob = write_oracle(params, "student", 9, "d" * 64)
        path = tmp_path / "hand.gzlt"
        path.write_bytes(blob)
        loaded, meta = load_checkpoint(path)
        assert set(loaded) == set(params)
        for name, want in params.items():
            assert np.array_equal(loaded[name], want)
        assert meta == CheckpointMeta("student", 9, "d" * 64)


class TestCorruption:
    def _saved(self, tmp_path):
        path = tmp_path / "ck.gzlt"
        save_checkpoint(path, _params(), META)
        return path, bytearray(path.read_bytes())

    def test_bad_magic(self, tmp_path):
        path, blob = self._saved(tmp_path)
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="offset 0"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path, blob = self._saved(tmp_path)
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version 99"):
            load_checkpoint(path)

    def test_truncation_everywhere(self, tmp_path):
        path, blob = self._saved(tmp_path)
        for cut in (6, 13, 40, len(blob) - 9, len(blob) - 1):
            path.write_bytes(bytes(blob[:cut]))
            with pytest.raises(FormatError, match="truncated"):
                load_checkpoint(path)

    def test_payload_flip_fails_checksum(self, tmp_path):
        path, blob = self._saved(tmp_path)
        blob[-9] ^= 0xFF  # last payload byte, just before the trailer
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="checksum"):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        path, blob = self._saved(tmp_path)
        path.write_bytes(bytes(blob) + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)

    def test_duplicate_name(self, tmp_path):
        scalar = struct.pack("<H", 1) + b"x" + struct.pack("<B", 0)
        payload = struct.pack("<f", 1.0)
        body = (scalar + payload) * 2
        crc = zlib.crc32(payload + payload)
        blob = MAGIC + struct.pack("<II", VERSION, 2) + body + struct.pack("<Q", crc)
        path = tmp_path / "dup.gzlt"
        path.write_bytes(blob)
        with pytest.raises(FormatError, match="duplicate"):
            load_checkpoint(path)

    def test_missing_metadata(self, tmp_path):
        scalar = struct.pack("<H", 1) + b"x" + struct.pack("<B", 0)
        payload = struct.pack("<f", 1.0)
        crc = zlib.crc32(payload)
        blob = MAGIC + struct.pack("<II", VERSION, 1) + scalar + payload + struct.pack("<Q", crc)
        path = tmp_path / "bare.gzlt"
        path.write_bytes(blob)
        with pytest.raises(FormatError, match="__meta.stage"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError, match="missing checkpoint"):
            load_checkpoint(tmp_path / "absent.gzlt")


class TestGuards:
    def test_stage_mismatch(self, tmp_path):
        path = tmp_path / "t.gzlt"
        save_checkpoint(path, _params(), META)
        _, meta = load_checkpoint(path)
        with pytest.raises(ConfigError, match="'teacher' where 'student'"):
            require_stage(meta, "student", path)
        require_stage(meta, "teacher", path)

    def test_config_hash_mismatch(self):
        with pytest.raises(ConfigError, match="does not match"):
            require_config_hash(META, "f" * 64)
        require_config_hash(META, META.config_hash)

    def test_unknown_and_missing_tensor_names(self):
        with pytest.raises(FormatError, match="unknown tensor name 'extra'"):
            check_tensor_names({"a": 1, "extra": 2}, ["a"])
        with pytest.raises(FormatError, match="missing tensor 'b'"):
            check_tensor_names({"a": 1}, ["a", "b"])
        check_tensor_names({"a": 1, "b": 2}, ["a", "b"])

    def test_reserved_prefix_rejected_on_save(self, tmp_path):
        with pytest.raises(ConfigError, match="__meta"):
            save_checkpoint(tmp_path / "x.gzlt", {"__meta.stage": np.zeros(1)}, META)

    def test_invalid_stage_value(self):
        with pytest.raises(ConfigError, match="stage"):
            CheckpointMeta(stage="optimizer", seed=0, config_hash="aa")
