"""Deployment state: one home directory holding everything a run needs.

Layout::

    home/
      config.json        deployment names, seed, rng/clock counters
      authority.json     ABE master seed and attribute universe
      ledger.jsonl       one canonical-JSON block per line
      objects/           content-addressed store
      transcript.jsonl   every agent message moved, in order
      wallets/<name>.json

Provisioning registers the health authority, the hospital, and the
emergency server on chain, anchors their institution credentials, and
issues the emergency server its override attribute. With a seed, all
randomness and timestamps come from reproducible sources, so two identical
runs leave byte-identical ledgers.
"""

from __future__ import annotations

import json
from pathlib import Path

from .abe import AbeAuthority
from .agents import (
    BaseAgent,
    DoctorAgent,
    EmergencyServerAgent,
    HospitalAgent,
    PatientAgent,
    Services,
)
from .canonical import b64e, canonical_bytes
from .cas import FileCas
from .errors import DirectoryNotEmpty, ProtocolViolation, UnknownDid
from .identity import Signer, create_identity, issue_credential
from .ledger import (
    KIND_CREDENTIAL_ANCHOR,
    KIND_DID_REGISTRATION,
    Ledger,
    make_transaction,
)
from .policy import EMERGENCY_OVERRIDE, is_valid_attribute_name
from .rng import CountingClock, SeededRng, SystemClock, SystemRng
from .transport import Router, Transcript
from .wallet import Wallet

CLOCK_EPOCH = 1_700_000_000

AUTHORITY_NAME = "authority"
HOSPITAL_NAME = "hospital"
EMERGENCY_NAME = "emergency"

_AGENT_CLASSES = {
    "patient": PatientAgent,
    "doctor": DoctorAgent,
    "hospital": HospitalAgent,
    "emergency": EmergencyServerAgent,
    "authority": BaseAgent,
}


class Deployment:
    def __init__(self, home: Path, config: dict, services: Services):
        self.home = home
        self.config = config
        self.services = services
        self.wallets: dict[str, Wallet] = {}
        self._agents: dict[str, BaseAgent] = {}

    # --- paths ---

    @staticmethod
    def _paths(home: Path) -> dict:
        return {
            "config": home / "config.json",
            "authority": home / "authority.json",
            "ledger": home / "ledger.jsonl",
            "transcript": home / "transcript.jsonl",
            "wallets": home / "wallets",
        }

    # --- lifecycle ---

    @classmethod
    def provision(cls, home: str | Path, seed: bytes | None = None) -> "Deployment":
        home = Path(home)
        if home.exists() and any(home.iterdir()):
            raise DirectoryNotEmpty(f"{home} is not empty")
        home.mkdir(parents=True, exist_ok=True)
        paths = cls._paths(home)
        paths["wallets"].mkdir()

        if seed is not None:
            rng = SeededRng(seed)
            clock = CountingClock(CLOCK_EPOCH)
        else:
            rng = SystemRng()
            clock = SystemClock()

        authority = AbeAuthority.setup(rng.bytes(32), {EMERGENCY_OVERRIDE})
        ledger = Ledger(paths["ledger"])
        transcript = Transcript(paths["transcript"])
        services = Services(
            ledger=ledger,
            cas=FileCas(home),
            authority=authority,
            clock=clock,
            rng=rng,
            router=Router(transcript),
        )
        config = {
            "seed": seed.hex() if seed is not None else None,
            "rng_counter": 0,
            "clock": CLOCK_EPOCH,
            "authority_id": authority.params.authority_id,
            "names": {
                "authority": AUTHORITY_NAME,
                "hospital": HOSPITAL_NAME,
                "emergency": EMERGENCY_NAME,
            },
        }
        dep = cls(home, config, services)

        root = dep._create_wallet(AUTHORITY_NAME, "authority")
        hospital = dep._create_wallet(HOSPITAL_NAME, "hospital")
        emergency = dep._create_wallet(EMERGENCY_NAME, "emergency")
        issuer = root.signer()
        dep._issue_and_anchor(issuer, hospital, {"type": "institution", "role": "hospital"})
        dep._issue_and_anchor(issuer, emergency, {"type": "institution", "role": "emergency"})
        emergency.abe_key = authority.keygen({EMERGENCY_OVERRIDE})

        dep.save()
        return dep

    @classmethod
    def load(cls, home: str | Path) -> "Deployment":
        home = Path(home)
        paths = cls._paths(home)
        if not paths["config"].exists():
            raise ProtocolViolation(f"{home} is not an initialized deployment")
        config = json.loads(paths["config"].read_text())
        if config["seed"] is not None:
            rng = SeededRng(bytes.fromhex(config["seed"]), counter=config["rng_counter"])
            clock = CountingClock(config["clock"])
        else:
            rng = SystemRng()
            clock = SystemClock()
        authority = AbeAuthority.from_json(json.loads(paths["authority"].read_text()))
        transcript = Transcript(paths["transcript"])
        services = Services(
            ledger=Ledger(paths["ledger"]),
            cas=FileCas(home),
            authority=authority,
            clock=clock,
            rng=rng,
            router=Router(transcript),
        )
        dep = cls(home, config, services)
        for wallet_file in sorted(paths["wallets"].glob("*.json")):
            wallet = Wallet.load(wallet_file)
            dep.wallets[wallet.name] = wallet
        return dep

    def save(self, wallet_names: list[str] | None = None, include_shared: bool = True) -> None:
        """Persist state. Multi-process demos scope the save to the wallets
        this process owns so peers' files are not clobbered with stale copies.
        """
        paths = self._paths(self.home)
        if include_shared:
            if self.services.rng.deterministic:
                self.config["rng_counter"] = self.services.rng.counter
                self.config["clock"] = self.services.clock.value
            paths["config"].write_bytes(canonical_bytes(self.config))
            paths["authority"].write_bytes(
                canonical_bytes(self.services.authority.to_json())
            )
        names = self.wallets.keys() if wallet_names is None else wallet_names
        for name in names:
            wallet = self.wallets[name]
            wallet.save(paths["wallets"] / f"{wallet.name}.json")

    # --- identities ---

    def _create_wallet(self, name: str, kind: str) -> Wallet:
        if name in self.wallets:
            raise ProtocolViolation(f"wallet name already in use: {name}")
        keys, did, document = create_identity(
            rng=self.services.rng, service_endpoint=f"local:{name}"
        )
        wallet = Wallet(name=name, kind=kind, keys=keys, did=did, document=document)
        self.wallets[name] = wallet
        self.services.ledger.submit(
            make_transaction(
                KIND_DID_REGISTRATION,
                {
                    "did": did,
                    "public_key": b64e(keys.public_bytes),
                    "did_document_hash": document.hash_hex(),
                },
                wallet.signer(),
                self.services.clock.now(),
            )
        )
        return wallet

    def _issue_and_anchor(self, issuer: Signer, subject: Wallet, claims: dict):
        credential = issue_credential(
            issuer, subject.did, claims, self.services.clock.now()
        )
        self.services.ledger.submit(
            make_transaction(
                KIND_CREDENTIAL_ANCHOR,
                {"credential_hash": credential.hash_hex(), "issuer_did": issuer.did},
                issuer,
                self.services.clock.now(),
            )
        )
        subject.credentials.append(credential)
        return credential

    def register_patient(self, name: str) -> Wallet:
        wallet = self._create_wallet(name, "patient")
        issuer = self.wallets[self.config["names"]["authority"]].signer()
        self._issue_and_anchor(issuer, wallet, {"type": "identity", "name": name})
        return wallet

    def register_doctor(self, name: str, attrs: set[str]) -> Wallet:
        if not attrs:
            raise ProtocolViolation("a doctor needs at least one attribute")
        for attr in attrs:
            if not is_valid_attribute_name(attr):
                raise ProtocolViolation(f"invalid attribute name: {attr!r}")
        wallet = self._create_wallet(name, "doctor")
        issuer = self.wallets[self.config["names"]["authority"]].signer()
        claims = {"type": "license", "name": name}
        for attr in sorted(attrs):
            kind, _, value = attr.partition(":")
            claims[kind] = value or "true"
        self._issue_and_anchor(issuer, wallet, claims)
        for attr in attrs:
            self.services.authority.register_attribute(attr)
        wallet.abe_key = self.services.authority.keygen(attrs)
        return wallet

    # --- agents ---

    def agent(self, name: str) -> BaseAgent:
        if name not in self._agents:
            wallet = self.wallets.get(name)
            if wallet is None:
                raise UnknownDid(f"no wallet named {name!r}")
            cls = _AGENT_CLASSES[wallet.kind]
            self._agents[name] = cls(wallet, self.services)
        return self._agents[name]

    def wake_all(self) -> None:
        """Instantiate every wallet's agent so the router can reach them all."""
        for name in self.wallets:
            self.agent(name)

    def hospital_agent(self) -> HospitalAgent:
        return self.agent(self.config["names"]["hospital"])

    def emergency_agent(self) -> EmergencyServerAgent:
        return self.agent(self.config["names"]["emergency"])

    def wallet_by_did(self, did: str) -> Wallet | None:
        for wallet in self.wallets.values():
            if wallet.did == did:
                return wallet
        return None
