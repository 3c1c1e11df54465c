"""Identity primitives: Ed25519 keypairs, DIDs, DID documents, credentials.

A DID is ``did:ex:`` plus the base58 of the first 20 bytes of the SHA-256 of
the public key, so it is derivable from exactly one key. Anywise DIDs are
registered on the ledger and publicly resolvable; pairwise DIDs are minted
per relationship, live only in the two wallets, and never touch the ledger.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .canonical import b64d, b64e, canonical_bytes, sha256_hex
from .errors import EmptyClaims
from .rng import SystemRng

DID_PREFIX = "did:ex:"

_B58_ALPHABET = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"

_SYSTEM_RNG = SystemRng()


def b58encode(data: bytes) -> str:
    num = int.from_bytes(data, "big")
    out = []
    while num > 0:
        num, rem = divmod(num, 58)
        out.append(_B58_ALPHABET[rem])
    pad = 0
    for byte in data:
        if byte == 0:
            pad += 1
        else:
            break
    return "1" * pad + "".join(reversed(out))


@dataclass
class KeyPair:
    """Ed25519 signing keypair; the secret half never leaves wallet files."""

    public_bytes: bytes
    _private: Ed25519PrivateKey = field(repr=False)

    @classmethod
    def from_secret_bytes(cls, secret: bytes) -> "KeyPair":
        private = Ed25519PrivateKey.from_private_bytes(secret)
        pub = private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return cls(public_bytes=pub, _private=private)

    @classmethod
    def generate(cls, rng=None) -> "KeyPair":
        rng = rng or _SYSTEM_RNG
        return cls.from_secret_bytes(rng.bytes(32))

    @property
    def secret_bytes(self) -> bytes:
        return self._private.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )

    def sign(self, message: bytes) -> bytes:
        return self._private.sign(message)


def verify_signature(public_bytes: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_bytes).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def did_from_public_key(public_bytes: bytes) -> str:
    digest = hashlib.sha256(public_bytes).digest()[:20]
    return DID_PREFIX + b58encode(digest)


def did_body(did: str) -> str:
    """The base58 part of a DID text form (used as policy attribute values)."""
    if not did.startswith(DID_PREFIX):
        raise ValueError(f"not a DID: {did!r}")
    return did[len(DID_PREFIX):]


@dataclass(frozen=True)
class DidDocument:
    did: str
    public_key: bytes
    service_endpoint: str

    def to_json(self) -> dict:
        return {
            "did": self.did,
            "public_key": b64e(self.public_key),
            "service_endpoint": self.service_endpoint,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DidDocument":
        return cls(
            did=data["did"],
            public_key=b64d(data["public_key"]),
            service_endpoint=data["service_endpoint"],
        )

    def hash_hex(self) -> str:
        return sha256_hex(canonical_bytes(self.to_json()))


def create_identity(
    seed: bytes | None = None, rng=None, service_endpoint: str = "local:wallet"
) -> tuple[KeyPair, str, DidDocument]:
    """Mint a keypair, its DID, and a DID document. Deterministic given a seed."""
    if seed is not None:
        keys = KeyPair.from_secret_bytes(seed)
    else:
        keys = KeyPair.generate(rng)
    did = did_from_public_key(keys.public_bytes)
    doc = DidDocument(did=did, public_key=keys.public_bytes, service_endpoint=service_endpoint)
    return keys, did, doc


@dataclass(frozen=True)
class PairwiseDid:
    """Relationship-scoped DID: same shape as any DID, known to two parties."""

    did: str
    peer_did: str


def create_pairwise(peer_did: str, rng=None) -> tuple[KeyPair, PairwiseDid]:
    keys = KeyPair.generate(rng)
    return keys, PairwiseDid(did=did_from_public_key(keys.public_bytes), peer_did=peer_did)


@dataclass(frozen=True)
class Signer:
    """A DID together with the keypair that controls it."""

    did: str
    keys: KeyPair


@dataclass(frozen=True)
class Credential:
    """Signed claims an issuer makes about a subject DID."""

    id: str
    issuer_did: str
    subject_did: str
    claims: Mapping[str, str]
    issued_at: int
    signature: bytes

    def signing_payload(self) -> dict:
        return {
            "id": self.id,
            "issuer_did": self.issuer_did,
            "subject_did": self.subject_did,
            "claims": dict(self.claims),
            "issued_at": self.issued_at,
        }

    def to_json(self) -> dict:
        data = self.signing_payload()
        data["signature"] = b64e(self.signature)
        return data

    @classmethod
    def from_json(cls, data: dict) -> "Credential":
        return cls(
            id=data["id"],
            issuer_did=data["issuer_did"],
            subject_did=data["subject_did"],
            claims=dict(data["claims"]),
            issued_at=data["issued_at"],
            signature=b64d(data["signature"]),
        )

    def hash_hex(self) -> str:
        return sha256_hex(canonical_bytes(self.to_json()))


def issue_credential(
    issuer: Signer, subject_did: str, claims: Mapping[str, str], issued_at: int
) -> Credential:
    if not claims:
        raise EmptyClaims("credential must carry at least one claim")
    body = {
        "issuer_did": issuer.did,
        "subject_did": subject_did,
        "claims": dict(claims),
        "issued_at": issued_at,
    }
    cred_id = "cred-" + sha256_hex(canonical_bytes(body))[:16]
    unsigned = Credential(
        id=cred_id,
        issuer_did=issuer.did,
        subject_did=subject_did,
        claims=dict(claims),
        issued_at=issued_at,
        signature=b"",
    )
    signature = issuer.keys.sign(canonical_bytes(unsigned.signing_payload()))
    return Credential(
        id=cred_id,
        issuer_did=issuer.did,
        subject_did=subject_did,
        claims=dict(claims),
        issued_at=issued_at,
        signature=signature,
    )


def verify_credential(credential: Credential, ledger) -> tuple[bool, str | None]:
    """Check issuer signature and on-chain anchoring; both are required.

    Returns (ok, reason) with reason one of UnknownIssuer, BadSignature,
    UnanchoredCredential, or None when valid.
    """
    from .errors import UnknownDid

    try:
        issuer_key, _ = ledger.resolve_did(credential.issuer_did)
    except UnknownDid:
        return False, "UnknownIssuer"
    payload = canonical_bytes(credential.signing_payload())
    if not verify_signature(issuer_key, payload, credential.signature):
        return False, "BadSignature"
    if not ledger.has_credential_anchor(credential.hash_hex()):
        return False, "UnanchoredCredential"
    return True, None


_CHALLENGE_TAG = b"ehrvault-challenge|"


def sign_challenge(keys: KeyPair, nonce: bytes) -> bytes:
    return keys.sign(_CHALLENGE_TAG + nonce)


def verify_challenge(did: str, nonce: bytes, signature: bytes, ledger) -> bool:
    from .errors import UnknownDid

    try:
        public_key, _ = ledger.resolve_did(did)
    except UnknownDid:
        return False
    return verify_signature(public_key, _CHALLENGE_TAG + nonce, signature)


def verify_challenge_with_key(public_key: bytes, nonce: bytes, signature: bytes) -> bool:
    return verify_signature(public_key, _CHALLENGE_TAG + nonce, signature)
