"""Content-addressed store: both backends behind one contract."""

from __future__ import annotations

import hashlib

import pytest
from hypothesis import given, strategies as st

from ehrvault.cas import FileCas, MemoryCas, cid_digest_hex, make_cid, validate_cid
from ehrvault.errors import (
    EmptyObject,
    IntegrityViolation,
    MalformedCid,
    NotFound,
    StorageFull,
)


@pytest.fixture(params=["memory", "file"])
def store(request, tmp_path):
    if request.param == "memory":
        return MemoryCas()
    return FileCas(tmp_path)


class TestContract:
    def test_put_get_round_trip(self, store):
        cid = store.put(b"hello")
        assert store.get(cid) == b"hello"

    def test_idempotent_put(self, store):
        first = store.put(b"same bytes")
        count = store.object_count()
        second = store.put(b"same bytes")
        assert first == second
        assert store.object_count() == count

    def test_known_digest_for_abc(self, store):
        cid = store.put(b"abc")
        assert (
            cid_digest_hex(cid)
            == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        )

    def test_absent_cid(self, store):
        with pytest.raises(NotFound):
            store.get(make_cid(b"never stored"))

    def test_has(self, store):
        cid = make_cid(b"x")
        assert store.has(cid) is False
        store.put(b"x")
        assert store.has(cid) is True

    def test_empty_object_rejected(self, store):
        with pytest.raises(EmptyObject):
            store.put(b"")

    def test_content_addressing_invariant(self, store):
        for payload in (b"a", b"bb", bytes(300)):
            cid = store.put(payload)
            assert hashlib.sha256(store.get(cid)).hexdigest() == cid_digest_hex(cid)


class TestCidParsing:
    def test_round_trip(self):
        cid = make_cid(b"abc")
        assert validate_cid(cid) == cid

    @pytest.mark.parametrize(
        "bad",
        [
            "sha256:short",
            "sha256:" + "g" * 64,  # non-hex
            "sha256:" + "AB" * 32,  # uppercase
            "md5:" + "a" * 64,
            "a" * 64,
            "sha256:" + "a" * 65,
            "",
        ],
    )
    def test_rejects_other_shapes(self, bad):
        with pytest.raises(MalformedCid):
            validate_cid(bad)


class TestFileBackend:
    def test_layout_two_level(self, tmp_path):
        store = FileCas(tmp_path)
        cid = store.put(b"abc")
        digest = cid_digest_hex(cid)
        assert (tmp_path / "objects" / digest[:2] / digest[2:]).is_file()

    def test_tamper_behind_store(self, tmp_path):
        store = FileCas(tmp_path)
        cid = store.put(b"important bytes")
        digest = cid_digest_hex(cid)
        path = tmp_path / "objects" / digest[:2] / digest[2:]
        data = bytearray(path.read_bytes())
        data[0] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(IntegrityViolation):
            store.get(cid)

    def test_capacity(self, tmp_path):
        store = FileCas(tmp_path, capacity=2)
        store.put(b"one")
        store.put(b"two")
        store.put(b"two")  # idempotent re-put is free
        with pytest.raises(StorageFull):
            store.put(b"three")


class TestMemoryBackend:
    def test_capacity(self):
        store = MemoryCas(capacity=1)
        store.put(b"one")
        with pytest.raises(StorageFull):
            store.put(b"two")

    def test_internal_corruption_detected(self):
        store = MemoryCas()
        cid = store.put(b"fragile")
        store._objects[cid] = b"swapped"
        with pytest.raises(IntegrityViolation):
            store.get(cid)


@given(st.binary(min_size=1, max_size=500))
def test_round_trip_property(payload):
    store = MemoryCas()
    assert store.get(store.put(payload)) == payload
