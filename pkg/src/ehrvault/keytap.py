"""Test-only key tap.

Tests install a tap to collect every data key and KEK the crypto layer
produces, then byte-scan agent state and transcripts to prove none leaked.
When no tap is installed (the normal case) recording is a no-op.
"""

from __future__ import annotations


class KeyTap:
    def __init__(self):
        self.data_keys: set[bytes] = set()
        self.keks: set[bytes] = set()

    def record(self, kind: str, material: bytes) -> None:
        if kind == "data_key":
            self.data_keys.add(bytes(material))
        elif kind == "kek":
            self.keks.add(bytes(material))
        else:
            raise ValueError(f"unknown key kind: {kind}")

    def all_material(self) -> set[bytes]:
        return self.data_keys | self.keks


_active: KeyTap | None = None


def install(tap: KeyTap) -> None:
    global _active
    _active = tap


def uninstall() -> None:
    global _active
    _active = None


def record(kind: str, material: bytes) -> None:
    if _active is not None:
        _active.record(kind, material)
