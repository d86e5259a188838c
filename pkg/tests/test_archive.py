import json

import numpy as np
import pytest

from scl_lle import archive


def test_roundtrip(tmp_path, rng):
    arrays = {"b": rng.random((2, 3)).astype(np.float32), "a": np.arange(4, dtype=np.float32)}
    archive.save(tmp_path / "x.bin", {"kind": "t", "n": 1}, arrays)
    manifest, out = archive.load(tmp_path / "x.bin")
    assert manifest == {"kind": "t", "n": 1}
    assert set(out) == {"a", "b"}
    assert np.array_equal(out["b"], arrays["b"])


def test_encoding_is_canonical(rng):
    a = rng.random(5).astype(np.float32)
    assert archive.encode({"y": 1, "x": 2}, {"p": a, "q": a}) == archive.encode({"x": 2, "y": 1}, {"q": a, "p": a})


@pytest.mark.parametrize("mutate, offset", [
    (lambda d: b"BADMAGIC" + d[8:], 0),
    (lambda d: d[:5], 5),
    (lambda d: d + b"\0", None),
])
def test_corruption_offsets(tmp_path, mutate, offset):
    data = archive.encode({"k": 1}, {"w": np.ones(3, dtype=np.float32)})
    p = tmp_path / "c.bin"
    p.write_bytes(mutate(data))
    with pytest.raises(archive.ArchiveError) as info:
        archive.load(p)
    assert "offset" in str(info.value)
    if offset is not None:
        assert info.value.offset == offset
    else:
        assert info.value.offset == len(data)


def test_bad_json_header_offset(tmp_path):
    data = bytearray(archive.encode({"k": 1}, {}))
    start = 16
    data[start] = ord("!")
    p = tmp_path / "j.bin"
    p.write_bytes(bytes(data))
    with pytest.raises(archive.ArchiveError) as info:
        archive.load(p)
    assert info.value.offset == start


def test_save_is_atomic_and_hash_stable(tmp_path):
    p = tmp_path / "h.bin"
    archive.save(p, {"a": 1}, {"x": np.zeros(2, dtype=np.float32)})
    h = archive.content_hash(p)
    archive.save(p, {"a": 1}, {"x": np.zeros(2, dtype=np.float32)})
    assert archive.content_hash(p) == h
    assert [q.name for q in tmp_path.iterdir()] == ["h.bin"]
