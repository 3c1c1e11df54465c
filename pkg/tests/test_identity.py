"""DIDs, keypairs, credentials, and challenge proofs."""

from __future__ import annotations

import dataclasses

import pytest

from ehrvault.canonical import b64e
from ehrvault.errors import EmptyClaims
from ehrvault.identity import (
    Credential,
    KeyPair,
    Signer,
    create_identity,
    create_pairwise,
    did_body,
    did_from_public_key,
    issue_credential,
    sign_challenge,
    verify_challenge,
    verify_challenge_with_key,
    verify_credential,
    verify_signature,
)
from ehrvault.ledger import (
    KIND_CREDENTIAL_ANCHOR,
    KIND_DID_REGISTRATION,
    Ledger,
    make_transaction,
)


def _register(ledger: Ledger, keys: KeyPair, did: str, document) -> None:
    ledger.submit(
        make_transaction(
            KIND_DID_REGISTRATION,
            {
                "did": did,
                "public_key": b64e(keys.public_bytes),
                "did_document_hash": document.hash_hex(),
            },
            Signer(did=did, keys=keys),
            timestamp=1,
        )
    )


def _anchor(ledger: Ledger, credential: Credential, issuer: Signer) -> None:
    ledger.submit(
        make_transaction(
            KIND_CREDENTIAL_ANCHOR,
            {"credential_hash": credential.hash_hex(), "issuer_did": issuer.did},
            issuer,
            timestamp=2,
        )
    )


@pytest.fixture
def issuer_on_ledger():
    ledger = Ledger()
    keys, did, document = create_identity(seed=b"\x21" * 32)
    _register(ledger, keys, did, document)
    return ledger, Signer(did=did, keys=keys)


class TestDids:
    def test_seeded_identity_is_stable(self):
        one = create_identity(seed=b"\x01" * 32)
        two = create_identity(seed=b"\x01" * 32)
        assert one[1] == two[1]
        assert one[1].startswith("did:ex:")

    def test_random_identities_distinct(self):
        assert create_identity()[1] != create_identity()[1]

    def test_did_recomputable_from_public_key(self):
        keys, did, _ = create_identity(seed=b"\x02" * 32)
        assert did_from_public_key(keys.public_bytes) == did

    def test_did_body_strips_method(self):
        _, did, _ = create_identity(seed=b"\x03" * 32)
        assert "did:ex:" + did_body(did) == did

    def test_document_hash_stable(self):
        _, _, doc = create_identity(seed=b"\x04" * 32)
        assert doc.hash_hex() == doc.hash_hex()


class TestPairwise:
    def test_fresh_per_relationship(self):
        _, peer, _ = create_identity(seed=b"\x05" * 32)
        one_keys, one = create_pairwise(peer)
        two_keys, two = create_pairwise(peer)
        assert one.did != two.did
        assert one.peer_did == two.peer_did == peer

    def test_pairwise_key_controls_pairwise_did(self):
        _, peer, _ = create_identity(seed=b"\x06" * 32)
        keys, pairwise = create_pairwise(peer)
        assert did_from_public_key(keys.public_bytes) == pairwise.did
        sig = keys.sign(b"prove it")
        assert verify_signature(keys.public_bytes, b"prove it", sig)


class TestCredentials:
    def test_admission_credential_verifies(self, issuer_on_ledger):
        ledger, issuer = issuer_on_ledger
        _, subject, _ = create_identity(seed=b"\x31" * 32)
        credential = issue_credential(
            issuer, subject, {"type": "admission", "hospital": "H", "visit": "V"}, 10
        )
        _anchor(ledger, credential, issuer)
        assert verify_credential(credential, ledger) == (True, None)

    def test_license_credential_verifies(self, issuer_on_ledger):
        ledger, issuer = issuer_on_ledger
        _, subject, _ = create_identity(seed=b"\x32" * 32)
        credential = issue_credential(
            issuer, subject, {"type": "license", "dept": "cardiology"}, 11
        )
        _anchor(ledger, credential, issuer)
        assert verify_credential(credential, ledger) == (True, None)

    def test_empty_claims_rejected(self, issuer_on_ledger):
        _, issuer = issuer_on_ledger
        with pytest.raises(EmptyClaims):
            issue_credential(issuer, "did:ex:x", {}, 12)

    def test_flipped_claim_is_bad_signature(self, issuer_on_ledger):
        ledger, issuer = issuer_on_ledger
        _, subject, _ = create_identity(seed=b"\x33" * 32)
        credential = issue_credential(issuer, subject, {"type": "admission"}, 13)
        _anchor(ledger, credential, issuer)
        tampered = dataclasses.replace(credential, claims={"type": "admissioN"})
        assert verify_credential(tampered, ledger) == (False, "BadSignature")

    def test_unanchored_credential_rejected(self, issuer_on_ledger):
        ledger, issuer = issuer_on_ledger
        _, subject, _ = create_identity(seed=b"\x34" * 32)
        credential = issue_credential(issuer, subject, {"type": "admission"}, 14)
        assert verify_credential(credential, ledger) == (False, "UnanchoredCredential")

    def test_unknown_issuer(self):
        ledger = Ledger()
        keys, did, _ = create_identity(seed=b"\x35" * 32)
        credential = issue_credential(
            Signer(did=did, keys=keys), "did:ex:subject", {"type": "admission"}, 15
        )
        assert verify_credential(credential, ledger) == (False, "UnknownIssuer")

    def test_single_bit_mutations_never_verify(self, issuer_on_ledger):
        ledger, issuer = issuer_on_ledger
        _, subject, _ = create_identity(seed=b"\x36" * 32)
        credential = issue_credential(issuer, subject, {"type": "admission"}, 16)
        _anchor(ledger, credential, issuer)
        for byte_index in range(0, len(credential.signature), 7):
            sig = bytearray(credential.signature)
            sig[byte_index] ^= 0x01
            mutated = dataclasses.replace(credential, signature=bytes(sig))
            ok, reason = verify_credential(mutated, ledger)
            assert (ok, reason) == (False, "BadSignature"), byte_index

    def test_serialization_round_trip(self, issuer_on_ledger):
        _, issuer = issuer_on_ledger
        credential = issue_credential(issuer, "did:ex:s", {"type": "x"}, 17)
        assert Credential.from_json(credential.to_json()) == credential
        assert credential.hash_hex() == Credential.from_json(credential.to_json()).hash_hex()


class TestChallenges:
    def test_honest_signer_verifies(self, issuer_on_ledger):
        ledger, issuer = issuer_on_ledger
        nonce = b"\xAB" * 32
        sig = sign_challenge(issuer.keys, nonce)
        assert verify_challenge(issuer.did, nonce, sig, ledger)
        assert verify_challenge_with_key(issuer.keys.public_bytes, nonce, sig)

    def test_wrong_key_fails(self, issuer_on_ledger):
        ledger, issuer = issuer_on_ledger
        other = KeyPair.from_secret_bytes(b"\x44" * 32)
        nonce = b"\xAB" * 32
        assert not verify_challenge(issuer.did, nonce, sign_challenge(other, nonce), ledger)

    def test_different_nonce_fails(self, issuer_on_ledger):
        ledger, issuer = issuer_on_ledger
        sig = sign_challenge(issuer.keys, b"\x01" * 32)
        assert not verify_challenge(issuer.did, b"\x02" * 32, sig, ledger)

    def test_unknown_did_fails(self):
        keys = KeyPair.from_secret_bytes(b"\x45" * 32)
        nonce = b"\x00" * 32
        assert not verify_challenge(
            "did:ex:unregistered", nonce, sign_challenge(keys, nonce), Ledger()
        )

    def test_challenge_signature_is_domain_separated(self, issuer_on_ledger):
        # A challenge signature must not double as a signature over the
        # bare nonce, or vice versa.
        _, issuer = issuer_on_ledger
        nonce = b"\xCD" * 32
        bare = issuer.keys.sign(nonce)
        assert not verify_challenge_with_key(issuer.keys.public_bytes, nonce, bare)
