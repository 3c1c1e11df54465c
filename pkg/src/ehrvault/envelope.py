"""Record encryption and the two-layer key envelope.

Records are encrypted convergently: the AES-128-GCM key is the first 128
bits of the record's SHA-256 and the nonce is the next 96 bits, so identical
plaintext always yields identical ciphertext and hence the same content
address. The nonce reuse is safe because each key encrypts exactly the one
plaintext it was derived from. The flip side is the standard convergent
caveat: anyone who can guess a record's exact bytes can confirm the guess
against the public ciphertext.

The data key is wrapped twice. An inner AES-GCM layer encrypts it under a
random KEK, and an ABE layer encrypts the KEK under the access policy. A
consent change therefore only replaces the ABE layer: the holder of a
satisfying key mints a replacement envelope (a signed rewrap token) and the
storing agent splices it in without ever seeing the KEK or the data key.
Every sealed policy is OR-extended with ``emergency:override`` so the
emergency server can open any envelope; that attribute secret is issued to
the emergency server alone.
"""

from __future__ import annotations

from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import keytap
from .abe import AbeAuthority, AbeCiphertext, AbeUserKey, abe_decrypt, abe_encrypt
from .canonical import b64d, b64e, canonical_bytes, sha256, sha256_hex
from .errors import BadSignature, CidMismatch, EnvelopeCorrupt, VersionGap
from .errors import AuthenticationFailure, MalformedPolicy
from .identity import Signer, verify_signature
from .policy import (
    Policy,
    parse_policy,
    policy_to_string,
    validate_policy,
    with_emergency_branch,
)
from .rng import SystemRng

KEY_LEN = 16
NONCE_LEN = 12
TAG_LEN = 16

_SYSTEM_RNG = SystemRng()


@dataclass(frozen=True)
class DataKey:
    """Content-derived 128-bit AES key for exactly one record."""

    bytes: bytes

    def __post_init__(self):
        if len(self.bytes) != KEY_LEN:
            raise ValueError("data key must be 16 bytes")


@dataclass(frozen=True)
class Kek:
    """Random 128-bit key-encryption key; exists only inside wallet-side ops."""

    bytes: bytes

    def __post_init__(self):
        if len(self.bytes) != KEY_LEN:
            raise ValueError("KEK must be 16 bytes")


@dataclass(frozen=True)
class RecordCiphertext:
    ciphertext: bytes
    nonce: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "RecordCiphertext":
        if len(data) < NONCE_LEN + TAG_LEN:
            raise AuthenticationFailure("record ciphertext too short")
        return cls(
            ciphertext=data[NONCE_LEN:-TAG_LEN],
            nonce=data[:NONCE_LEN],
            tag=data[-TAG_LEN:],
        )


def derive_data_key(plaintext: bytes) -> tuple[DataKey, bytes]:
    """Key = SHA-256(plaintext) bits 0..127, nonce = bits 128..223."""
    digest = sha256(plaintext)
    key = DataKey(digest[:KEY_LEN])
    keytap.record("data_key", key.bytes)
    return key, digest[KEY_LEN:KEY_LEN + NONCE_LEN]


def encrypt_record(plaintext: bytes) -> tuple[RecordCiphertext, DataKey]:
    """Convergent AES-128-GCM: byte-identical output for identical input."""
    key, nonce = derive_data_key(plaintext)
    blob = AESGCM(key.bytes).encrypt(nonce, plaintext, None)
    return RecordCiphertext(ciphertext=blob[:-TAG_LEN], nonce=nonce, tag=blob[-TAG_LEN:]), key


def decrypt_record(record: RecordCiphertext, key: DataKey) -> bytes:
    try:
        return AESGCM(key.bytes).decrypt(
            record.nonce, record.ciphertext + record.tag, None
        )
    except InvalidTag as exc:
        raise AuthenticationFailure("record authentication failed") from exc


@dataclass(frozen=True)
class KeyEnvelope:
    """The unit of consent: a policy-gated wrapping of one record's data key.

    ``policy`` always equals the policy embedded in ``wrapped_kek`` and
    includes the implicit emergency branch. ``version`` counts consent
    changes for the record; the ledger is the authority on which version is
    current.
    """

    cid: str
    version: int
    policy: Policy
    wrapped_kek: AbeCiphertext
    kek_nonce: bytes
    kek_wrapped_data_key: bytes

    def to_json(self) -> dict:
        return {
            "cid": self.cid,
            "version": self.version,
            "policy": policy_to_string(self.policy),
            "wrapped_kek": b64e(self.wrapped_kek.to_bytes()),
            "kek_nonce": b64e(self.kek_nonce),
            "kek_wrapped_data_key": b64e(self.kek_wrapped_data_key),
        }

    def to_bytes(self) -> bytes:
        return canonical_bytes(self.to_json())

    def hash_hex(self) -> str:
        return sha256_hex(self.to_bytes())

    @classmethod
    def from_json(cls, data: dict) -> "KeyEnvelope":
        import json

        wrapped = AbeCiphertext.from_json(json.loads(b64d(data["wrapped_kek"])))
        env = cls(
            cid=data["cid"],
            version=data["version"],
            policy=parse_policy(data["policy"]),
            wrapped_kek=wrapped,
            kek_nonce=b64d(data["kek_nonce"]),
            kek_wrapped_data_key=b64d(data["kek_wrapped_data_key"]),
        )
        if policy_to_string(env.policy) != policy_to_string(wrapped.policy):
            raise EnvelopeCorrupt("envelope policy does not match the ABE layer")
        return env

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeyEnvelope":
        import json

        try:
            return cls.from_json(json.loads(data.decode("utf-8")))
        except (ValueError, KeyError, TypeError) as exc:
            raise EnvelopeCorrupt(f"cannot parse key envelope: {exc}") from exc


def _kek_aad(cid: str) -> bytes:
    # Ties the inner wrap to the record it governs so a wrapped data key
    # cannot be spliced into another record's envelope.
    return b"kek-wrap|" + cid.encode("ascii")


def seal_envelope(
    data_key: DataKey,
    policy: Policy,
    authority: AbeAuthority,
    cid: str,
    version: int,
    rng=None,
) -> KeyEnvelope:
    """Wrap the data key under a fresh KEK, and the KEK under the policy."""
    validate_policy(policy)
    if version < 1:
        raise MalformedPolicy("envelope version must be >= 1")
    rng = rng or _SYSTEM_RNG
    effective = with_emergency_branch(policy)
    validate_policy(effective)
    kek = Kek(rng.bytes(KEY_LEN))
    keytap.record("kek", kek.bytes)
    wrapped_kek = abe_encrypt(kek.bytes, effective, authority, rng=rng)
    kek_nonce = rng.bytes(NONCE_LEN)
    wrapped_dk = AESGCM(kek.bytes).encrypt(kek_nonce, data_key.bytes, _kek_aad(cid))
    return KeyEnvelope(
        cid=cid,
        version=version,
        policy=effective,
        wrapped_kek=wrapped_kek,
        kek_nonce=kek_nonce,
        kek_wrapped_data_key=wrapped_dk,
    )


def open_envelope(env: KeyEnvelope, user_key: AbeUserKey) -> DataKey:
    """Recover the data key iff the user's attributes satisfy the policy."""
    kek_bytes = abe_decrypt(env.wrapped_kek, user_key)  # PolicyNotSatisfied here
    try:
        raw = AESGCM(kek_bytes).decrypt(
            env.kek_nonce, env.kek_wrapped_data_key, _kek_aad(env.cid)
        )
    except InvalidTag as exc:
        raise EnvelopeCorrupt("inner wrap failed authentication") from exc
    if len(raw) != KEY_LEN:
        raise EnvelopeCorrupt("inner wrap yielded a malformed data key")
    key = DataKey(raw)
    keytap.record("data_key", key.bytes)
    return key


@dataclass(frozen=True)
class RewrapToken:
    """A holder-authorized replacement envelope, signed for the proxy.

    The proxy that applies it sees only ciphertext: the token carries the
    fully-built successor envelope, never any key material.
    """

    cid: str
    new_envelope: KeyEnvelope
    authorized_by: str
    signature: bytes

    def signing_payload(self) -> dict:
        return {"cid": self.cid, "new_envelope": self.new_envelope.to_json()}

    def to_json(self) -> dict:
        return {
            "cid": self.cid,
            "new_envelope": self.new_envelope.to_json(),
            "authorized_by": self.authorized_by,
            "signature": b64e(self.signature),
        }

    @classmethod
    def from_json(cls, data: dict) -> "RewrapToken":
        return cls(
            cid=data["cid"],
            new_envelope=KeyEnvelope.from_json(data["new_envelope"]),
            authorized_by=data["authorized_by"],
            signature=b64d(data["signature"]),
        )


def make_rewrap_token(
    env: KeyEnvelope,
    user_key: AbeUserKey,
    new_policy: Policy,
    rotate: bool,
    signer: Signer,
    authority: AbeAuthority,
    rng=None,
) -> RewrapToken:
    """Open the KEK layer and build the successor envelope.

    rotate=False re-wraps the same KEK under the new policy and copies the
    inner wrap unchanged (grants). rotate=True draws a fresh KEK and re-wraps
    the data key under it, so holders of the old envelope bytes keep only
    what they already cached (revocations).
    """
    validate_policy(new_policy)
    rng = rng or _SYSTEM_RNG
    kek_bytes = abe_decrypt(env.wrapped_kek, user_key)
    keytap.record("kek", kek_bytes)
    effective = with_emergency_branch(new_policy)

    if rotate:
        try:
            data_key_bytes = AESGCM(kek_bytes).decrypt(
                env.kek_nonce, env.kek_wrapped_data_key, _kek_aad(env.cid)
            )
        except InvalidTag as exc:
            raise EnvelopeCorrupt("inner wrap failed authentication") from exc
        keytap.record("data_key", data_key_bytes)
        fresh_kek = rng.bytes(KEY_LEN)
        keytap.record("kek", fresh_kek)
        kek_nonce = rng.bytes(NONCE_LEN)
        wrapped_dk = AESGCM(fresh_kek).encrypt(kek_nonce, data_key_bytes, _kek_aad(env.cid))
        wrapped_kek = abe_encrypt(fresh_kek, effective, authority, rng=rng)
    else:
        kek_nonce = env.kek_nonce
        wrapped_dk = env.kek_wrapped_data_key
        wrapped_kek = abe_encrypt(kek_bytes, effective, authority, rng=rng)

    new_env = KeyEnvelope(
        cid=env.cid,
        version=env.version + 1,
        policy=effective,
        wrapped_kek=wrapped_kek,
        kek_nonce=kek_nonce,
        kek_wrapped_data_key=wrapped_dk,
    )
    unsigned = RewrapToken(
        cid=env.cid, new_envelope=new_env, authorized_by=signer.did, signature=b""
    )
    signature = signer.keys.sign(canonical_bytes(unsigned.signing_payload()))
    return RewrapToken(
        cid=env.cid, new_envelope=new_env, authorized_by=signer.did, signature=signature
    )


def apply_rewrap(old_env: KeyEnvelope, token: RewrapToken, resolve_key) -> KeyEnvelope:
    """Splice in the successor envelope. Blind by construction: no parameter
    of this operation can carry a KEK or data key.

    ``resolve_key`` maps the authorizer DID to its public key bytes (ledger
    lookup for anywise DIDs, wallet lookup for pairwise ones).
    """
    if token.cid != old_env.cid or token.new_envelope.cid != old_env.cid:
        raise CidMismatch(f"token is for {token.cid}, envelope is for {old_env.cid}")
    if token.new_envelope.version != old_env.version + 1:
        raise VersionGap(
            f"token carries version {token.new_envelope.version}, "
            f"expected {old_env.version + 1}"
        )
    try:
        public_key = resolve_key(token.authorized_by)
    except KeyError:
        raise BadSignature(f"no key known for authorizer {token.authorized_by}")
    payload = canonical_bytes(token.signing_payload())
    if not verify_signature(public_key, payload, token.signature):
        raise BadSignature("rewrap token signature does not verify")
    return token.new_envelope
