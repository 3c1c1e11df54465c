"""Simulated append-only hash-chained ledger: the accountability root.

Single writer, no consensus: every submitted transaction is validated,
sealed into its own block, and appended to a newline-delimited canonical
JSON file. What goes on chain is deliberately narrow: anywise DID
registrations, credential hashes, record and key-envelope anchors, and
emergency accesses. Pairwise DIDs and any personal data stay off-chain.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path

from .canonical import b64d, b64e, canonical_bytes, sha256_hex
from .errors import (
    BadSignature,
    DuplicateDid,
    DuplicateRecordAnchor,
    UnknownCid,
    UnknownDid,
    UnknownSignerDid,
    VersionGap,
)
from .identity import Signer, did_from_public_key, verify_signature

KIND_DID_REGISTRATION = "did_registration"
KIND_CREDENTIAL_ANCHOR = "credential_anchor"
KIND_RECORD_ANCHOR = "record_anchor"
KIND_KEY_ANCHOR = "key_anchor"
KIND_EMERGENCY_ACCESS = "emergency_access"

GENESIS_PREV_HASH = "0" * 64


@dataclass(frozen=True)
class Transaction:
    kind: str
    body: dict
    timestamp: int
    signer_did: str
    signature: bytes

    def signing_payload(self) -> dict:
        return {
            "kind": self.kind,
            "body": self.body,
            "timestamp": self.timestamp,
            "signer_did": self.signer_did,
        }

    def to_json(self) -> dict:
        data = self.signing_payload()
        data["signature"] = b64e(self.signature)
        return data

    @classmethod
    def from_json(cls, data: dict) -> "Transaction":
        return cls(
            kind=data["kind"],
            body=dict(data["body"]),
            timestamp=data["timestamp"],
            signer_did=data["signer_did"],
            signature=b64d(data["signature"]),
        )


def make_transaction(kind: str, body: dict, signer: Signer, timestamp: int) -> Transaction:
    unsigned = Transaction(
        kind=kind, body=body, timestamp=timestamp, signer_did=signer.did, signature=b""
    )
    signature = signer.keys.sign(canonical_bytes(unsigned.signing_payload()))
    return Transaction(
        kind=kind, body=body, timestamp=timestamp, signer_did=signer.did, signature=signature
    )


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: str
    transactions: tuple[Transaction, ...]
    block_hash: str

    @staticmethod
    def compute_hash(height: int, prev_hash: str, transactions: tuple[Transaction, ...]) -> str:
        payload = {
            "height": height,
            "prev_hash": prev_hash,
            "transactions": [tx.to_json() for tx in transactions],
        }
        return sha256_hex(canonical_bytes(payload))

    @classmethod
    def seal(cls, height: int, prev_hash: str, transactions: tuple[Transaction, ...]) -> "Block":
        return cls(
            height=height,
            prev_hash=prev_hash,
            transactions=transactions,
            block_hash=cls.compute_hash(height, prev_hash, transactions),
        )

    def to_json(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash,
            "transactions": [tx.to_json() for tx in self.transactions],
            "block_hash": self.block_hash,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Block":
        return cls(
            height=data["height"],
            prev_hash=data["prev_hash"],
            transactions=tuple(Transaction.from_json(t) for t in data["transactions"]),
            block_hash=data["block_hash"],
        )


def genesis_block() -> Block:
    # A fixed constant, so a re-linked fork with a different genesis is
    # detectable at height 0 no matter how carefully it recomputed hashes.
    return Block.seal(0, GENESIS_PREV_HASH, ())


class Ledger:
    """In-memory chain with optional file persistence (one block per line)."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self.blocks: list[Block] = []
        self._dids: dict[str, tuple[bytes, str]] = {}
        self._credential_hashes: set[str] = set()
        self._record_anchors: dict[str, Transaction] = {}
        self._key_anchors: dict[str, list[Transaction]] = {}
        self._emergency: list[Transaction] = []
        if self.path is not None and self.path.exists():
            self._load_existing()
        else:
            self._append_block(genesis_block())

    # --- persistence ---

    def _load_existing(self) -> None:
        from .errors import IntegrityViolation

        assert self.path is not None
        for number, line in enumerate(self.path.read_text().splitlines()):
            if not line.strip():
                continue
            try:
                block = Block.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise IntegrityViolation(
                    f"ledger file corrupt at line {number}; run `ledger verify`"
                ) from exc
            self.blocks.append(block)
            for tx in block.transactions:
                self._index(tx)
        if not self.blocks:
            self._append_block(genesis_block())

    def _append_block(self, block: Block) -> None:
        self.blocks.append(block)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(canonical_bytes(block.to_json()).decode("utf-8") + "\n")
                fh.flush()

    # --- submission ---

    def submit(self, tx: Transaction) -> tuple[int, int]:
        """Validate, seal into the next block, and append. Returns (height, index)."""
        with self._lock:
            self._verify_transaction_signature(tx)
            self._check_kind_rules(tx)
            prev = self.blocks[-1]
            block = Block.seal(prev.height + 1, prev.block_hash, (tx,))
            self._append_block(block)
            self._index(tx)
            return block.height, 0

    def _verify_transaction_signature(self, tx: Transaction) -> None:
        payload = canonical_bytes(tx.signing_payload())
        if tx.kind == KIND_DID_REGISTRATION:
            # Self-signed bootstrap: the embedded key must derive the DID
            # being registered, and the registrant signs with it.
            public_key = b64d(tx.body["public_key"])
            if did_from_public_key(public_key) != tx.body["did"]:
                raise BadSignature("registered DID does not derive from the given key")
            if tx.signer_did != tx.body["did"]:
                raise BadSignature("DID registrations must be self-signed")
        else:
            entry = self._dids.get(tx.signer_did)
            if entry is None:
                raise UnknownSignerDid(f"signer not registered: {tx.signer_did}")
            public_key = entry[0]
        if not verify_signature(public_key, payload, tx.signature):
            raise BadSignature(f"bad signature on {tx.kind} from {tx.signer_did}")

    def _check_kind_rules(self, tx: Transaction) -> None:
        body = tx.body
        if tx.kind == KIND_DID_REGISTRATION:
            if body["did"] in self._dids:
                raise DuplicateDid(f"already registered: {body['did']}")
        elif tx.kind == KIND_RECORD_ANCHOR:
            if body["cid"] in self._record_anchors:
                raise DuplicateRecordAnchor(f"record already anchored: {body['cid']}")
        elif tx.kind == KIND_KEY_ANCHOR:
            current = self.current_version(body["cid"])
            if body["version"] != current + 1:
                raise VersionGap(
                    f"key anchor version {body['version']} for {body['cid']}, "
                    f"current is {current}"
                )

    def _index(self, tx: Transaction) -> None:
        body = tx.body
        if tx.kind == KIND_DID_REGISTRATION:
            self._dids[body["did"]] = (b64d(body["public_key"]), body["did_document_hash"])
        elif tx.kind == KIND_CREDENTIAL_ANCHOR:
            self._credential_hashes.add(body["credential_hash"])
        elif tx.kind == KIND_RECORD_ANCHOR:
            self._record_anchors[body["cid"]] = tx
        elif tx.kind == KIND_KEY_ANCHOR:
            self._key_anchors.setdefault(body["cid"], []).append(tx)
        elif tx.kind == KIND_EMERGENCY_ACCESS:
            self._emergency.append(tx)

    # --- queries ---

    def resolve_did(self, did: str) -> tuple[bytes, str]:
        entry = self._dids.get(did)
        if entry is None:
            raise UnknownDid(f"not registered: {did}")
        return entry

    def has_did(self, did: str) -> bool:
        return did in self._dids

    def has_credential_anchor(self, credential_hash: str) -> bool:
        return credential_hash in self._credential_hashes

    def record_anchor(self, cid: str) -> Transaction | None:
        return self._record_anchors.get(cid)

    def current_version(self, cid: str) -> int:
        anchors = self._key_anchors.get(cid)
        return anchors[-1].body["version"] if anchors else 0

    def latest_key_anchor(self, cid: str) -> Transaction:
        anchors = self._key_anchors.get(cid)
        if not anchors:
            raise UnknownCid(f"no key anchors for {cid}")
        return anchors[-1]

    def consent_history(self, cid: str) -> list[Transaction]:
        if cid not in self._key_anchors and cid not in self._record_anchors:
            raise UnknownCid(f"never anchored: {cid}")
        return list(self._key_anchors.get(cid, []))

    def emergency_accesses(
        self, cid: str | None = None, requester_did: str | None = None
    ) -> list[Transaction]:
        events = self._emergency
        if cid is not None:
            events = [tx for tx in events if tx.body["cid"] == cid]
        if requester_did is not None:
            events = [tx for tx in events if tx.body["requester_did"] == requester_did]
        return list(events)

    def iter_transactions(self):
        for block in self.blocks:
            for tx in block.transactions:
                yield block.height, tx

    def all_key_anchors(self) -> list[tuple[int, Transaction]]:
        return [(h, tx) for h, tx in self.iter_transactions() if tx.kind == KIND_KEY_ANCHOR]

    # --- verification ---

    def verify_chain(self) -> tuple[bool, int | None]:
        return verify_blocks(self.blocks)

    @staticmethod
    def verify_file(path: str | Path) -> tuple[bool, int | None]:
        """Replay a persisted chain; a malformed line fails at its height."""
        blocks: list[Block] = []
        for height, line in enumerate(Path(path).read_text().splitlines()):
            try:
                block = Block.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError):
                return False, height
            blocks.append(block)
        return verify_blocks(blocks)


def verify_blocks(blocks: list[Block]) -> tuple[bool, int | None]:
    """Recompute every hash and link; returns (ok, first bad height).

    Heights are positional, so a block whose stored height field was
    tampered with is reported at the position it occupies in the chain.
    """
    if not blocks:
        return False, 0
    if blocks[0] != genesis_block():
        return False, 0
    for position, block in enumerate(blocks[1:], start=1):
        prev = blocks[position - 1]
        if block.height != position:
            return False, position
        if block.prev_hash != prev.block_hash:
            return False, position
        recomputed = Block.compute_hash(block.height, block.prev_hash, block.transactions)
        if recomputed != block.block_hash:
            return False, position
    return True, None
