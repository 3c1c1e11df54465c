"""Content-addressed object store: immutable put/get keyed by SHA-256.

Stands in for the consortium storage network. Two backends share the
interface: an in-memory dict for tests and a directory tree for real
deployments (``<root>/objects/<first-2-hex>/<remaining-62-hex>``). Every
read re-hashes the bytes, so silent backend corruption surfaces as an
IntegrityViolation instead of bad data.
"""

from __future__ import annotations

import errno
import os
import re
import threading
from pathlib import Path

from .canonical import sha256_hex
from .errors import (
    EmptyObject,
    IntegrityViolation,
    MalformedCid,
    NotFound,
    StorageFull,
)

CID_RE = re.compile(r"sha256:[0-9a-f]{64}\Z")


def make_cid(data: bytes) -> str:
    return "sha256:" + sha256_hex(data)


def validate_cid(text: str) -> str:
    if not isinstance(text, str) or not CID_RE.match(text):
        raise MalformedCid(f"not a valid cid: {text!r}")
    return text


def cid_digest_hex(cid: str) -> str:
    return validate_cid(cid).split(":", 1)[1]


def cid_from_digest_hex(digest_hex: str) -> str:
    return validate_cid("sha256:" + digest_hex)


class MemoryCas:
    """Dict-backed store; optional object-count capacity for full-store tests."""

    def __init__(self, capacity: int | None = None):
        self._objects: dict[str, bytes] = {}
        self._capacity = capacity
        self._lock = threading.Lock()

    def put(self, data: bytes) -> str:
        if not data:
            raise EmptyObject("refusing to store an empty object")
        cid = make_cid(data)
        with self._lock:
            if cid in self._objects:
                return cid
            if self._capacity is not None and len(self._objects) >= self._capacity:
                raise StorageFull(f"store at capacity ({self._capacity} objects)")
            self._objects[cid] = bytes(data)
        return cid

    def get(self, cid: str) -> bytes:
        validate_cid(cid)
        data = self._objects.get(cid)
        if data is None:
            raise NotFound(f"no object for {cid}")
        if make_cid(data) != cid:
            raise IntegrityViolation(f"stored bytes no longer match {cid}")
        return data

    def has(self, cid: str) -> bool:
        validate_cid(cid)
        return cid in self._objects

    def object_count(self) -> int:
        return len(self._objects)


class FileCas:
    """One file per object under ``root/objects``, named by content hash."""

    def __init__(self, root: str | Path, capacity: int | None = None):
        self.root = Path(root)
        self.objects_dir = self.root / "objects"
        self.objects_dir.mkdir(parents=True, exist_ok=True)
        self._capacity = capacity
        self._lock = threading.Lock()

    def _path(self, cid: str) -> Path:
        digest = cid_digest_hex(cid)
        return self.objects_dir / digest[:2] / digest[2:]

    def put(self, data: bytes) -> str:
        if not data:
            raise EmptyObject("refusing to store an empty object")
        cid = make_cid(data)
        path = self._path(cid)
        with self._lock:
            if path.exists():
                return cid
            if self._capacity is not None and self.object_count() >= self._capacity:
                raise StorageFull(f"store at capacity ({self._capacity} objects)")
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            try:
                tmp.write_bytes(data)
                os.replace(tmp, path)
            except OSError as exc:
                if exc.errno == errno.ENOSPC:
                    raise StorageFull("backend out of space") from exc
                raise
        return cid

    def get(self, cid: str) -> bytes:
        path = self._path(cid)
        if not path.exists():
            raise NotFound(f"no object for {cid}")
        data = path.read_bytes()
        if make_cid(data) != cid:
            raise IntegrityViolation(f"stored bytes no longer match {cid}")
        return data

    def has(self, cid: str) -> bool:
        return self._path(cid).exists()

    def object_count(self) -> int:
        return sum(1 for _ in self.objects_dir.glob("*/*") if _.is_file())
