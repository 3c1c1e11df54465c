"""Wallets: the per-actor file holding keys, credentials, and relationships.

One JSON document per agent. Secret keys are stored base64 and the file is
chmod 0600; nothing in a wallet ever goes on chain directly. Pairwise
relationships (channels) live here too, including the handshake state that
survives between CLI invocations.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .abe import AbeUserKey
from .canonical import b64d, b64e, canonical_bytes
from .identity import Credential, DidDocument, KeyPair, Signer

STATE_INVITED = "invited"
STATE_VERIFIED = "verified"
STATE_PAIRWISE = "pairwise_established"
STATE_ADMITTED = "admitted"

_STATE_ORDER = [STATE_INVITED, STATE_VERIFIED, STATE_PAIRWISE, STATE_ADMITTED]


def state_rank(state: str) -> int:
    return _STATE_ORDER.index(state)


@dataclass
class Channel:
    """One pairwise relationship, from this wallet's side."""

    peer_anywise: str
    initiated_by_me: bool
    state: str = STATE_INVITED
    phase: str = ""
    my_did: str | None = None
    my_keys: KeyPair | None = None
    peer_pairwise_did: str | None = None
    peer_pairwise_key: bytes | None = None
    peer_credential: dict | None = None
    my_challenge: bytes | None = None
    admission_credential: Credential | None = None
    seen_nonces: set[str] = field(default_factory=set)

    def advance_state(self, state: str) -> None:
        # Handshake phases only ever move forward.
        if state_rank(state) < state_rank(self.state):
            raise ValueError(f"state cannot regress from {self.state} to {state}")
        self.state = state

    def pairwise_signer(self) -> Signer:
        if self.my_did is None or self.my_keys is None:
            raise ValueError("pairwise identity not established yet")
        return Signer(did=self.my_did, keys=self.my_keys)

    def to_json(self) -> dict:
        return {
            "peer_anywise": self.peer_anywise,
            "initiated_by_me": self.initiated_by_me,
            "state": self.state,
            "phase": self.phase,
            "my_did": self.my_did,
            "my_secret_key": b64e(self.my_keys.secret_bytes) if self.my_keys else None,
            "peer_pairwise_did": self.peer_pairwise_did,
            "peer_pairwise_key": b64e(self.peer_pairwise_key) if self.peer_pairwise_key else None,
            "peer_credential": self.peer_credential,
            "my_challenge": b64e(self.my_challenge) if self.my_challenge else None,
            "admission_credential": (
                self.admission_credential.to_json() if self.admission_credential else None
            ),
            "seen_nonces": sorted(self.seen_nonces),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Channel":
        return cls(
            peer_anywise=data["peer_anywise"],
            initiated_by_me=data["initiated_by_me"],
            state=data["state"],
            phase=data["phase"],
            my_did=data["my_did"],
            my_keys=(
                KeyPair.from_secret_bytes(b64d(data["my_secret_key"]))
                if data["my_secret_key"]
                else None
            ),
            peer_pairwise_did=data["peer_pairwise_did"],
            peer_pairwise_key=(
                b64d(data["peer_pairwise_key"]) if data["peer_pairwise_key"] else None
            ),
            peer_credential=data["peer_credential"],
            my_challenge=b64d(data["my_challenge"]) if data["my_challenge"] else None,
            admission_credential=(
                Credential.from_json(data["admission_credential"])
                if data["admission_credential"]
                else None
            ),
            seen_nonces=set(data["seen_nonces"]),
        )


class Wallet:
    def __init__(
        self,
        name: str,
        kind: str,
        keys: KeyPair,
        did: str,
        document: DidDocument,
    ):
        self.name = name
        self.kind = kind  # patient | doctor | hospital | emergency | authority
        self.keys = keys
        self.did = did
        self.document = document
        self.credentials: list[Credential] = []
        self.abe_key: AbeUserKey | None = None
        self.channels: dict[str, Channel] = {}  # keyed by peer anywise DID
        self.records: list[dict] = []
        self.consent_requests: dict[str, dict] = {}
        self.decisions: list[dict] = []
        self.request_counter = 0

    def signer(self) -> Signer:
        return Signer(did=self.did, keys=self.keys)

    def find_credential(self, claim_type: str) -> Credential | None:
        for cred in self.credentials:
            if cred.claims.get("type") == claim_type:
                return cred
        return None

    def channel_with(self, peer_anywise: str) -> Channel | None:
        return self.channels.get(peer_anywise)

    def channel_by_pairwise_peer(self, peer_pairwise_did: str) -> Channel | None:
        for channel in self.channels.values():
            if channel.peer_pairwise_did == peer_pairwise_did:
                return channel
        return None

    def channel_by_my_pairwise(self, my_did: str) -> Channel | None:
        for channel in self.channels.values():
            if channel.my_did == my_did:
                return channel
        return None

    def my_dids(self) -> set[str]:
        dids = {self.did}
        for channel in self.channels.values():
            if channel.my_did:
                dids.add(channel.my_did)
        return dids

    def next_request_id(self) -> str:
        self.request_counter += 1
        return f"req-{self.request_counter}"

    # --- persistence ---

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "anywise": {
                "did": self.did,
                "secret_key": b64e(self.keys.secret_bytes),
                "document": self.document.to_json(),
            },
            "credentials": [c.to_json() for c in self.credentials],
            "abe_key": self.abe_key.to_json() if self.abe_key else None,
            "channels": {peer: ch.to_json() for peer, ch in sorted(self.channels.items())},
            "records": self.records,
            "consent_requests": self.consent_requests,
            "decisions": self.decisions,
            "request_counter": self.request_counter,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Wallet":
        keys = KeyPair.from_secret_bytes(b64d(data["anywise"]["secret_key"]))
        wallet = cls(
            name=data["name"],
            kind=data["kind"],
            keys=keys,
            did=data["anywise"]["did"],
            document=DidDocument.from_json(data["anywise"]["document"]),
        )
        wallet.credentials = [Credential.from_json(c) for c in data["credentials"]]
        wallet.abe_key = AbeUserKey.from_json(data["abe_key"]) if data["abe_key"] else None
        wallet.channels = {
            peer: Channel.from_json(ch) for peer, ch in data["channels"].items()
        }
        wallet.records = data["records"]
        wallet.consent_requests = data["consent_requests"]
        wallet.decisions = data["decisions"]
        wallet.request_counter = data["request_counter"]
        return wallet

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = canonical_bytes(self.to_json())
        path.write_bytes(data)
        os.chmod(path, 0o600)

    @classmethod
    def load(cls, path: str | Path) -> "Wallet":
        import json

        return cls.from_json(json.loads(Path(path).read_text()))
