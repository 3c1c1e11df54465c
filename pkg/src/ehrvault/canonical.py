"""Canonical serialization: the single byte form used for hashing and signing.

Sorted keys, compact separators, UTF-8. Anything that gets hashed, signed,
or stored (transactions, blocks, credentials, envelopes, messages) goes
through ``canonical_bytes`` so the byte form is stable across runs and
platforms.
"""

from __future__ import annotations

import base64
import hashlib
import json
from typing import Any


def canonical_bytes(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64d(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))
