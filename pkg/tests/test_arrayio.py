"""Binary persistence: bit-exact round-trips and corruption detection."""

import numpy as np
import pytest

from fusedet import arrayio, scenegen


def test_named_arrays_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(31)
    arrays = {
        "weights": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "bias": rng.normal(size=(4,)).astype(np.float32),
        "empty": np.zeros((0, 5), dtype=np.float32),
    }
    meta = {"step": 7, "note": "unit-test", "nested": {"lr": 1e-3}}
    p = tmp_path / "ckpt.bin"
    arrayio.save_arrays(p, arrays, meta)
    loaded, got_meta = arrayio.load_arrays(p)
    assert got_meta == meta
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert loaded[k].dtype == np.float32
        assert np.array_equal(loaded[k], arrays[k])


def test_save_then_save_is_byte_identical(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3)}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    arrayio.save_arrays(p1, arrays, {"k": 1})
    arrayio.save_arrays(p2, arrays, {"k": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_raises_format_error(tmp_path):
    p = tmp_path / "ckpt.bin"
    arrayio.save_arrays(p, {"a": np.zeros(3, dtype=np.float32)}, {})
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(arrayio.FormatError) as exc:
        arrayio.load_arrays(p)
    assert exc.value.offset == 0


def test_truncated_file_raises_format_error(tmp_path):
    p = tmp_path / "ckpt.bin"
    arrayio.save_arrays(p, {"a": np.arange(100, dtype=np.float32)}, {})
    full = p.read_bytes()
    p.write_bytes(full[: len(full) // 2])
    with pytest.raises(arrayio.FormatError):
        arrayio.load_arrays(p)


def test_trailing_garbage_raises_format_error(tmp_path):
    p = tmp_path / "ckpt.bin"
    arrayio.save_arrays(p, {"a": np.zeros(2, dtype=np.float32)}, {})
    p.write_bytes(p.read_bytes() + b"\x00garbage")
    with pytest.raises(arrayio.FormatError):
        arrayio.load_arrays(p)


def _tiny_scenes():
    spec = scenegen.SceneSpec(n_objects=2)
    return [scenegen.generate_scene(s, spec) for s in (100, 101, 102)]


def test_dataset_roundtrip_bit_exact(tmp_path):
    scenes = _tiny_scenes()
    p = tmp_path / "scenes.bin"
    scenegen.save_dataset(scenes, p, meta={"split": "test", "base_seed": 100})
    loaded, meta = scenegen.load_dataset(p)
    assert meta["split"] == "test"
    assert len(loaded) == len(scenes)
    for a, b in zip(scenes, loaded):
        assert scenegen.scenes_equal(a, b)


def test_dataset_rewrite_is_byte_identical(tmp_path):
    scenes = _tiny_scenes()
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    scenegen.save_dataset(scenes, p1, meta={"x": 1})
    scenegen.save_dataset(scenes, p2, meta={"x": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_dataset_roundtrip(tmp_path):
    p = tmp_path / "empty.bin"
    scenegen.save_dataset([], p, meta={})
    loaded, meta = scenegen.load_dataset(p)
    assert loaded == [] and meta == {}


def test_dataset_bad_magic(tmp_path):
    p = tmp_path / "scenes.bin"
    scenegen.save_dataset(_tiny_scenes()[:1], p)
    raw = bytearray(p.read_bytes())
    raw[0] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(arrayio.FormatError):
        scenegen.load_dataset(p)


def test_format_error_reports_offset(tmp_path):
    p = tmp_path / "scenes.bin"
    scenegen.save_dataset(_tiny_scenes()[:1], p)
    full = p.read_bytes()
    p.write_bytes(full[:40])  # cut inside the first scene record
    with pytest.raises(arrayio.FormatError) as exc:
        scenegen.load_dataset(p)
    assert exc.value.offset is not None and 0 < exc.value.offset <= 40
