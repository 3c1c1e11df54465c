"""Acceptance gate: one test per criterion, one printed line per criterion.

Each test prints ``ACCEPTANCE <n> PASS|FAIL: <title>`` directly to the real
stdout so the lines survive pytest capture. Run just this module with
``pytest tests/test_acceptance.py`` for the summary.
"""

from __future__ import annotations

import dataclasses
import functools
import random
import sys
import time
from pathlib import Path

import pytest

from ehrvault import agents, audit, keytap
from ehrvault.abe import abe_decrypt, abe_encrypt
from ehrvault.canonical import b64d, b64e
from ehrvault.cas import MemoryCas, make_cid
from ehrvault.commands import load_scenario, run_scenario
from ehrvault.deployment import Deployment
from ehrvault.envelope import encrypt_record, open_envelope
from ehrvault.errors import (
    ChallengeFailed,
    CredentialInvalid,
    DuplicateRecordAnchor,
    PolicyNotSatisfied,
    ProtocolViolation,
)
from ehrvault.identity import KeyPair, issue_credential, sign_challenge
from ehrvault.ledger import KIND_EMERGENCY_ACCESS, KIND_KEY_ANCHOR, Ledger
from ehrvault.policy import parse_policy
from ehrvault.transport import MSG_CHALLENGE_RESPONSE, MSG_PAIRWISE_OFFER, sign_message
from ehrvault.wallet import STATE_ADMITTED

from conftest import POLICY_SUITE, all_subsets

SCENARIO_DIR = Path(__file__).parent.parent / "scenarios"
SEED = b"\x24" * 32
PAYLOAD = bytes(range(16))
RECORD = b"discharge summary: full recovery expected"


def criterion(number: int, title: str):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"ACCEPTANCE {number:>2} FAIL: {title}", file=sys.__stdout__)
                raise
            print(f"ACCEPTANCE {number:>2} PASS: {title}", file=sys.__stdout__)

        return wrapper

    return decorate


def _provision(tmp_path, name="home") -> Deployment:
    return Deployment.provision(tmp_path / name, seed=SEED)


def _admitted_world(tmp_path):
    dep = _provision(tmp_path)
    dep.register_patient("alice")
    dep.register_doctor("bob", {"dept:cardiology"})
    dep.wake_all()
    agents.handshake(dep.agent("alice"), dep.hospital_agent())
    agents.handshake(dep.agent("bob"), dep.hospital_agent())
    return dep


@criterion(1, "ABE oracle equivalence over 192 cases in under 10 s")
def test_01_abe_oracle_equivalence(authority):
    started = time.monotonic()
    mismatches = []
    for text, oracle in POLICY_SUITE:
        ciphertext = abe_encrypt(PAYLOAD, parse_policy(text), authority)
        for subset in all_subsets({"a", "b", "c", "d"}):
            if subset:
                try:
                    got = abe_decrypt(ciphertext, authority.keygen(subset)) == PAYLOAD
                except PolicyNotSatisfied:
                    got = False
            else:
                got = False
            if got != oracle(subset):
                mismatches.append((text, sorted(subset)))
    elapsed = time.monotonic() - started
    assert mismatches == []
    assert elapsed < 10.0, f"took {elapsed:.2f}s"


@criterion(2, "worked example (a AND b) OR d: {d} and {a,b} open; singletons do not")
def test_02_worked_example(authority):
    policy = parse_policy("(a AND b) OR d")
    ciphertext = abe_encrypt(PAYLOAD, policy, authority)
    assert abe_decrypt(ciphertext, authority.keygen({"d"})) == PAYLOAD
    # Standard boolean semantics: {a, b} satisfies the conjunct branch.
    assert abe_decrypt(ciphertext, authority.keygen({"a", "b"})) == PAYLOAD
    for attrs in ({"a"}, {"b"}, {"c"}):
        with pytest.raises(PolicyNotSatisfied):
            abe_decrypt(ciphertext, authority.keygen(attrs))
    # The empty set cannot even be issued a key, and satisfies nothing.
    from ehrvault.errors import EmptyAttributeSet
    from ehrvault.policy import satisfies

    assert not satisfies(policy, set())
    with pytest.raises(EmptyAttributeSet):
        authority.keygen(set())


@criterion(3, "full consent lifecycle with byte-identical read, versions 1..3, under 5 s")
def test_03_consent_lifecycle(tmp_path):
    started = time.monotonic()
    dep = _admitted_world(tmp_path)
    alice, bob = dep.agent("alice"), dep.agent("bob")
    cid, _ = agents.store_record(dep.hospital_agent(), alice.wallet.did, RECORD)

    agents.request_access(bob, dep.hospital_agent(), cid, "cardiology follow-up")
    request_id = next(iter(alice.wallet.consent_requests))
    agents.decide_consent(alice, request_id, grant=True)
    assert bob.read_record(cid) == RECORD

    agents.revoke_access(alice, dep.hospital_agent(), cid, {"dept:cardiology"})
    with pytest.raises(PolicyNotSatisfied):
        bob.read_record(cid)

    rows = audit.consent_report(dep.services.ledger, dep.services.cas, cid)
    assert [row["version"] for row in rows] == [1, 2, 3]
    elapsed = time.monotonic() - started
    assert elapsed < 5.0, f"took {elapsed:.2f}s"


@criterion(4, "residual access: cached v2 envelope opens after revocation, v3 does not")
def test_04_residual_access(tmp_path):
    dep = _admitted_world(tmp_path)
    alice, bob = dep.agent("alice"), dep.agent("bob")
    cid, _ = agents.store_record(dep.hospital_agent(), alice.wallet.did, RECORD)
    cached_v2 = agents.grant_access(alice, dep.hospital_agent(), cid, {"dept:cardiology"})
    latest_v3 = agents.revoke_access(alice, dep.hospital_agent(), cid, {"dept:cardiology"})
    assert cached_v2.version == 2 and latest_v3.version == 3
    data_key = open_envelope(cached_v2, bob.wallet.abe_key)
    assert data_key.bytes  # the hard-drive copy still decrypts
    with pytest.raises(PolicyNotSatisfied):
        open_envelope(latest_v3, bob.wallet.abe_key)


@criterion(5, "emergency accountability: one logged event paired with its anchor")
def test_05_emergency_accountability(tmp_path):
    dep = _provision(tmp_path)
    steps = load_scenario(SCENARIO_DIR / "emergency_unconscious.json")
    run_scenario(dep, steps)
    ledger = dep.services.ledger
    events = [
        (h, tx) for h, tx in ledger.iter_transactions() if tx.kind == KIND_EMERGENCY_ACCESS
    ]
    assert len(events) == 1
    height, event = events[0]
    # Paired with the key anchor sealed immediately after it.
    anchors = {h: tx for h, tx in ledger.iter_transactions() if tx.kind == KIND_KEY_ANCHOR}
    paired = anchors[height + 1]
    assert paired.body["cid"] == event.body["cid"]
    assert paired.body["authorized_by_did"] == event.body["server_did"]
    # The report reachable by requester DID returns exactly this event.
    rows = audit.emergency_report(ledger, requester_did=event.body["requester_did"])
    assert len(rows) == 1
    assert rows[0]["justification_hash"] == event.body["justification_hash"]
    # Scenario-end checker: grants-without-log = 0 (and conversely).
    server_did = dep.wallets["emergency"].did
    assert audit.emergency_pairing(ledger, server_did) == []


@criterion(6, "proxy blindness: no tapped key bytes in hospital state or transcript")
def test_06_proxy_blindness(tmp_path):
    for index, name in enumerate(["consent_lifecycle.json", "emergency_unconscious.json"]):
        tap = keytap.KeyTap()
        keytap.install(tap)
        try:
            dep = _provision(tmp_path, name=f"home{index}")
            run_scenario(dep, load_scenario(SCENARIO_DIR / name))
        finally:
            keytap.uninstall()
        assert tap.data_keys and tap.keks, "tap saw no key material"
        surface = (
            dep.hospital_agent().state_snapshot()
            + dep.services.router.transcript.all_bytes()
        )
        for secret in tap.all_material():
            assert secret not in surface
            assert b64e(secret).encode() not in surface
            assert secret.hex().encode() not in surface


@criterion(7, "ledger integrity: tamper fails at the right height; lost envelope flagged")
def test_07_ledger_integrity(tmp_path):
    dep = _provision(tmp_path)
    run_scenario(dep, load_scenario(SCENARIO_DIR / "consent_lifecycle.json"))
    assert dep.services.ledger.verify_chain() == (True, None)

    ledger_path = dep.home / "ledger.jsonl"
    pristine = ledger_path.read_bytes()
    # Byte offset -> line number map, skipping the newline separators.
    line_starts = [0]
    for offset, byte in enumerate(pristine):
        if byte == 0x0A:
            line_starts.append(offset + 1)

    def line_of(offset: int) -> int:
        line = 0
        for number, start in enumerate(line_starts):
            if offset >= start:
                line = number
        return line

    probes = [p for p in range(3, len(pristine), 97) if pristine[p] != 0x0A]
    assert len(probes) > 50
    for offset in probes:
        mutated = bytearray(pristine)
        mutated[offset] ^= 0x01
        ledger_path.write_bytes(bytes(mutated))
        ok, first_bad = Ledger.verify_file(ledger_path)
        assert ok is False, f"mutation at byte {offset} went undetected"
        assert first_bad == line_of(offset), f"byte {offset}: {first_bad}"
    ledger_path.write_bytes(pristine)
    assert Ledger.verify_file(ledger_path) == (True, None)

    # Deleting one envelope object flags exactly that anchor.
    cid = next(
        tx.body["cid"]
        for _, tx in dep.services.ledger.iter_transactions()
        if tx.kind == KIND_KEY_ANCHOR
    )
    anchor = dep.services.ledger.latest_key_anchor(cid)
    digest = anchor.body["envelope_hash"]
    (dep.home / "objects" / digest[:2] / digest[2:]).unlink()
    report = audit.integrity_report(
        dep.services.ledger, dep.services.cas, dep.wallets["emergency"].did
    )
    assert report["chain_ok"] is True
    assert len(report["findings"]) == 1
    assert report["findings"][0]["kind"] == "missing_envelope"
    assert report["findings"][0]["version"] == anchor.body["version"]


@criterion(8, "convergent storage: duplicate anchors rejected, 1000 records collide nowhere")
def test_08_convergent_storage(tmp_path):
    dep = _admitted_world(tmp_path)
    alice_did = dep.agent("alice").wallet.did
    cid_one, _ = agents.store_record(dep.hospital_agent(), alice_did, RECORD)
    ciphertext, _ = encrypt_record(RECORD)
    assert make_cid(ciphertext.to_bytes()) == cid_one  # cid is a pure function
    with pytest.raises(DuplicateRecordAnchor):
        agents.store_record(dep.hospital_agent(), alice_did, RECORD)

    rnd = random.Random(2024)
    corpus = set()
    while len(corpus) < 1000:
        corpus.add(rnd.randbytes(rnd.randint(1, 160)))
    store = MemoryCas()
    cids = {store.put(encrypt_record(record)[0].to_bytes()) for record in corpus}
    assert len(cids) == 1000


@criterion(9, "handshake security: four forgeries abort cleanly, leaving nothing behind")
def test_09_handshake_security(tmp_path):
    dep = _provision(tmp_path)
    dep.register_patient("alice")
    dep.wake_all()
    hospital = dep.hospital_agent()

    def fresh_patient(name):
        dep.register_patient(name)
        return dep.agent(name)

    def assert_nothing_left(wallet_name):
        for wallet in (dep.wallets[wallet_name], hospital.wallet):
            for channel in wallet.channels.values():
                assert channel.my_did is None
                assert channel.peer_pairwise_did is None
                assert channel.state != STATE_ADMITTED
        assert dep.wallets[wallet_name].find_credential("admission") is None

    # (a) forged credential signature
    alice = dep.agent("alice")
    cred = alice.wallet.credentials[0]
    broken = bytearray(cred.signature)
    broken[0] ^= 1
    alice.wallet.credentials[0] = dataclasses.replace(cred, signature=bytes(broken))
    with pytest.raises(CredentialInvalid):
        agents.handshake(alice, hospital)
    assert_nothing_left("alice")
    alice.wallet.credentials[0] = cred

    # (b) signed but never anchored credential
    pat = fresh_patient("pat")
    pat.wallet.credentials[0] = issue_credential(
        dep.wallets["authority"].signer(), pat.wallet.did, {"type": "identity"}, 999
    )
    with pytest.raises(CredentialInvalid):
        agents.handshake(pat, hospital)
    assert_nothing_left("pat")

    # (c) challenge response signed with the wrong key
    quinn = fresh_patient("quinn")
    invitation = quinn.begin_handshake(hospital.wallet.did)
    presentation = hospital.receive(invitation)[0]
    challenge_q = quinn.receive(presentation)[0]
    response_h, challenge_h = hospital.receive(challenge_q)
    quinn.receive(response_h)
    rogue = KeyPair.from_secret_bytes(b"\x66" * 32)
    evil = sign_message(
        quinn.wallet.did,
        hospital.wallet.did,
        MSG_CHALLENGE_RESPONSE,
        {"challenge_sig": b64e(sign_challenge(rogue, b64d(challenge_h.body["nonce"])))},
        dep.services.rng.bytes(32),
        quinn.wallet.keys,
    )
    with pytest.raises(ChallengeFailed):
        hospital.receive(evil)
    assert_nothing_left("quinn")

    # (d) out-of-order message
    rita = fresh_patient("rita")
    hospital.receive(rita.begin_handshake(hospital.wallet.did))
    premature = sign_message(
        rita.wallet.did,
        hospital.wallet.did,
        MSG_PAIRWISE_OFFER,
        {
            "pairwise_did": "did:ex:zzz",
            "pairwise_public_key": b64e(b"\x00" * 32),
            "proof": b64e(b"\x00" * 64),
        },
        dep.services.rng.bytes(32),
        rita.wallet.keys,
    )
    with pytest.raises(ProtocolViolation):
        hospital.receive(premature)
    assert_nothing_left("rita")


@criterion(10, "determinism: two seeded runs leave byte-identical ledger files")
def test_10_determinism(tmp_path):
    ledgers = []
    for name in ("left", "right"):
        dep = Deployment.provision(tmp_path / name, seed=SEED)
        run_scenario(dep, load_scenario(SCENARIO_DIR / "consent_lifecycle.json"))
        dep.save()
        ledgers.append((tmp_path / name / "ledger.jsonl").read_bytes())
    assert ledgers[0] == ledgers[1]
    assert len(ledgers[0]) > 1000
