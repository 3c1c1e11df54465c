"""Exception classes shared across the package.

Every error carries a stable ``exit_code`` so the CLI can map failures to
distinct process exit statuses, and scenario scripts can assert on the
class name.
"""

from __future__ import annotations


class VaultError(Exception):
    """Base class for all ehrvault errors."""

    exit_code = 1


# --- policy / ABE ---

class MalformedPolicy(VaultError):
    exit_code = 10


class ParseError(VaultError):
    """Policy text rejected; carries the byte offset and the expected tokens."""

    exit_code = 11

    def __init__(self, message: str, offset: int, expected: tuple[str, ...] = ()):
        super().__init__(message)
        self.offset = offset
        self.expected = tuple(expected)


class PolicyNotSatisfied(VaultError):
    exit_code = 12


class ShareCorrupt(VaultError):
    exit_code = 13


class UnknownAttribute(VaultError):
    exit_code = 14

    def __init__(self, name: str):
        super().__init__(f"attribute not in universe: {name}")
        self.name = name


class EmptyUniverse(VaultError):
    exit_code = 15


class EmptyAttributeSet(VaultError):
    exit_code = 16


# --- record / envelope crypto ---

class AuthenticationFailure(VaultError):
    exit_code = 20


class EnvelopeCorrupt(VaultError):
    exit_code = 21


# --- content-addressed store ---

class EmptyObject(VaultError):
    exit_code = 30


class NotFound(VaultError):
    exit_code = 31


class IntegrityViolation(VaultError):
    exit_code = 32


class StorageFull(VaultError):
    exit_code = 33


class MalformedCid(VaultError):
    exit_code = 34


# --- ledger ---

class BadSignature(VaultError):
    exit_code = 40


class DuplicateDid(VaultError):
    exit_code = 41


class VersionGap(VaultError):
    exit_code = 42


class DuplicateRecordAnchor(VaultError):
    exit_code = 43


class UnknownSignerDid(VaultError):
    exit_code = 44


class UnknownDid(VaultError):
    exit_code = 45


class UnknownCid(VaultError):
    exit_code = 46


class CidMismatch(VaultError):
    exit_code = 47


# --- identity / agents ---

class EmptyClaims(VaultError):
    exit_code = 50


class CredentialInvalid(VaultError):
    exit_code = 51


class ChallengeFailed(VaultError):
    exit_code = 52


class ProtocolViolation(VaultError):
    exit_code = 53


class ChannelNotAuthenticated(VaultError):
    exit_code = 54


class AttributeNotInPolicy(VaultError):
    exit_code = 55


# --- CLI / scenarios ---

class DirectoryNotEmpty(VaultError):
    exit_code = 60


class ScenarioDiverged(VaultError):
    exit_code = 61

    def __init__(self, step: int, expected: str, actual: str, detail: str = ""):
        msg = f"step {step}: expected {expected}, got {actual}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.step = step
        self.expected = expected
        self.actual = actual


def error_by_name(name: str) -> type[VaultError] | None:
    """Look up an error class by its bare name, for scenario expectations."""
    cls = globals().get(name)
    if isinstance(cls, type) and issubclass(cls, VaultError):
        return cls
    return None
