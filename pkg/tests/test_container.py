import json
import struct

import numpy as np
import pytest

from dlisc import container


def sample():
    return {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.ones(4, dtype=np.float32)}


def test_round_trip_preserves_order_and_values(tmp_path):
    path = tmp_path / "x.dlisc"
    digest = container.write(path, container.KIND_WEIGHTS, {"k": 1}, sample())
    kind, meta, tensors, got = container.read(path, container.KIND_WEIGHTS)
    assert kind == container.KIND_WEIGHTS and meta["k"] == 1 and got == digest
    assert list(tensors) == ["b", "a"]
    assert np.array_equal(tensors["b"], sample()["b"])


def test_header_layout(tmp_path):
    blob, _ = container.encode(container.KIND_ADAPTER, {}, sample())
    magic, version, kind, hlen = struct.unpack_from("<6sHBI", blob)
    assert magic == b"DLISC\0" and version == 1 and kind == container.KIND_ADAPTER
    header = json.loads(blob[13 : 13 + hlen])
    assert [t["name"] for t in header["tensors"]] == ["b", "a"]


def test_manifest_lists_shapes_offsets_and_hash(tmp_path):
    path = tmp_path / "x.dlisc"
    digest = container.write(path, container.KIND_WEIGHTS, {}, sample())
    man = json.loads((tmp_path / "x.dlisc.manifest.json").read_text())
    assert man["content_hash"] == digest
    entries = {t["name"]: t for t in man["tensors"]}
    assert entries["b"]["shape"] == [2, 3] and entries["a"]["offset"] == entries["b"]["offset"] + 24


def test_hash_ignores_nothing(tmp_path):
    t = sample()
    h1 = container.content_hash({}, t)
    t["a"] = t["a"].copy()
    t["a"][0] = 2
    assert container.content_hash({}, t) != h1
    assert container.content_hash({"x": 1}, sample()) != container.content_hash({}, sample())


@pytest.mark.parametrize("cut", [3, 20, -1])
def test_truncation_detected(cut):
    blob, _ = container.encode(container.KIND_WEIGHTS, {}, sample())
    with pytest.raises(container.ContainerError):
        container.decode(blob[:cut])


def test_flipped_byte_detected():
    blob, _ = container.encode(container.KIND_WEIGHTS, {}, sample())
    bad = bytearray(blob)
    bad[-40] ^= 0xFF
    with pytest.raises(container.ContainerError):
        container.decode(bytes(bad))


def test_wrong_magic_and_kind():
    blob, _ = container.encode(container.KIND_WEIGHTS, {}, sample())
    with pytest.raises(container.ContainerError, match="magic"):
        container.decode(b"XXXXXX" + blob[6:])
    with pytest.raises(container.ContainerError):
        container.decode(blob, expect_kind=container.KIND_POOL)
