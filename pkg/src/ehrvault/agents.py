"""Protocol state machines for the four actor types.

Patient and doctor wallets initiate handshakes; the hospital and the
emergency server respond and issue admission credentials. After a channel
is established all traffic runs between pairwise DIDs; anywise DIDs appear
only in the opening credential exchange (and as the issuer of the anchored
admission credential, which is public by construction).

Consent mechanics: the patient (or the emergency server) opens the current
key envelope, mints the successor under the new policy, and signs it as a
rewrap token. The hospital agent applies tokens blindly: it stores the new
envelope and anchors its hash, and at no point does any key material pass
through its hands.
"""

from __future__ import annotations

from dataclasses import dataclass

from .abe import AbeAuthority
from .canonical import b64d, b64e, sha256_hex
from .cas import cid_from_digest_hex
from .envelope import (
    KeyEnvelope,
    RewrapToken,
    apply_rewrap,
    encrypt_record,
    make_rewrap_token,
    open_envelope,
    seal_envelope,
    decrypt_record,
    RecordCiphertext,
)
from .errors import (
    ChallengeFailed,
    ChannelNotAuthenticated,
    CredentialInvalid,
    EmptyObject,
    IntegrityViolation,
    PolicyNotSatisfied,
    ProtocolViolation,
    UnknownCid,
    VersionGap,
)
from .identity import (
    Credential,
    Signer,
    create_pairwise,
    did_body,
    did_from_public_key,
    sign_challenge,
    verify_challenge_with_key,
    verify_credential,
    verify_signature,
)
from .ledger import (
    KIND_CREDENTIAL_ANCHOR,
    KIND_EMERGENCY_ACCESS,
    KIND_KEY_ANCHOR,
    KIND_RECORD_ANCHOR,
    Ledger,
    make_transaction,
)
from .policy import Attr, Or, conjunction, remove_attributes, strip_emergency_branch
from .transport import (
    MSG_ADMISSION_CREDENTIAL,
    MSG_CHALLENGE,
    MSG_CHALLENGE_RESPONSE,
    MSG_CONSENT_DECISION,
    MSG_CONSENT_REQUEST,
    MSG_CREDENTIAL_PRESENTATION,
    MSG_EMERGENCY_GRANT,
    MSG_EMERGENCY_REQUEST,
    MSG_INVITATION,
    MSG_PAIRWISE_OFFER,
    MSG_RECORD_STORED,
    MSG_REWRAP_TOKEN,
    AgentMessage,
    Router,
    sign_message,
)
from .wallet import (
    Channel,
    STATE_ADMITTED,
    STATE_INVITED,
    STATE_PAIRWISE,
    STATE_VERIFIED,
    Wallet,
)

MAX_GRANT_RETRIES = 4

_PAIRWISE_PROOF_TAG = b"ehrvault-pairwise-proof|"


@dataclass
class Services:
    """Shared deployment services every agent talks to."""

    ledger: Ledger
    cas: object
    authority: AbeAuthority
    clock: object
    rng: object
    router: Router


@dataclass(frozen=True)
class ConsentRequest:
    """A doctor's request for record access, relayed hospital-to-patient."""

    cid: str
    requester_did: str
    requested_attributes: frozenset[str]
    purpose: str

    def __post_init__(self):
        if not self.requested_attributes:
            raise ProtocolViolation("consent request with an empty attribute set")

    @classmethod
    def from_body(cls, body: dict, requester_did: str) -> "ConsentRequest":
        return cls(
            cid=body["cid"],
            requester_did=requester_did,
            requested_attributes=frozenset(body.get("attributes", ())),
            purpose=body.get("purpose", ""),
        )


def patient_attribute(pairwise_did: str) -> str:
    """Policy attribute naming a patient by their pairwise DID body."""
    return "patient:" + did_body(pairwise_did)


def envelope_cid(envelope_hash_hex: str) -> str:
    return cid_from_digest_hex(envelope_hash_hex)


def fetch_current_envelope(services: Services, cid: str) -> KeyEnvelope:
    """Latest key anchor for the cid, resolved through the store."""
    anchor = services.ledger.latest_key_anchor(cid)
    env_bytes = services.cas.get(envelope_cid(anchor.body["envelope_hash"]))
    env = KeyEnvelope.from_bytes(env_bytes)
    if env.cid != cid or env.version != anchor.body["version"]:
        raise IntegrityViolation(
            f"stored envelope does not match anchor for {cid}"
        )
    return env


class BaseAgent:
    """Single-threaded message consumer plus the shared handshake machine."""

    issues_admission = False
    admission_claim_type = "admission"

    def __init__(self, wallet: Wallet, services: Services):
        self.wallet = wallet
        self.services = services
        services.router.register(wallet.did, self)
        for channel in wallet.channels.values():
            if channel.my_did:
                services.router.register(channel.my_did, self)

    # --- plumbing ---

    def _message(
        self, recipient: str, type_: str, body: dict, signer: Signer
    ) -> AgentMessage:
        nonce = self.services.rng.bytes(32)
        return sign_message(signer.did, recipient, type_, body, nonce, signer.keys)

    def _presentable_credential(self) -> Credential:
        for claim_type in ("institution", "identity", "license"):
            cred = self.wallet.find_credential(claim_type)
            if cred is not None:
                return cred
        raise CredentialInvalid(f"{self.wallet.name} holds no presentable credential")

    def _verify_incoming(self, msg: AgentMessage) -> Channel | None:
        from .canonical import canonical_bytes
        from .errors import UnknownDid

        if msg.recipient not in self.wallet.my_dids():
            raise ProtocolViolation(
                f"message for {msg.recipient} delivered to {self.wallet.did}"
            )
        channel = self.wallet.channel_by_pairwise_peer(msg.sender)
        if channel is not None:
            sender_key = channel.peer_pairwise_key
        else:
            channel = self.wallet.channel_with(msg.sender)
            try:
                sender_key, _ = self.services.ledger.resolve_did(msg.sender)
            except UnknownDid:
                raise ProtocolViolation(f"cannot resolve sender {msg.sender}")
        if not verify_signature(
            sender_key, canonical_bytes(msg.signing_payload()), msg.signature
        ):
            raise ProtocolViolation("message signature invalid")
        if channel is not None:
            nonce_key = b64e(msg.nonce)
            if nonce_key in channel.seen_nonces:
                raise ProtocolViolation("replayed message nonce")
            channel.seen_nonces.add(nonce_key)
        return channel

    def receive(self, msg: AgentMessage) -> list[AgentMessage]:
        channel = self._verify_incoming(msg)
        handler = getattr(self, "handle_" + msg.type, None)
        if handler is None:
            raise ProtocolViolation(f"{self.wallet.kind} cannot handle {msg.type}")
        return handler(msg, channel)

    def _expect_phase(self, channel: Channel | None, phase: str, msg: AgentMessage) -> Channel:
        if channel is None:
            raise ProtocolViolation(f"{msg.type} without an open channel")
        if channel.phase != phase:
            raise ProtocolViolation(
                f"{msg.type} out of order: channel phase is {channel.phase!r}"
            )
        return channel

    # --- handshake, initiator side ---

    def begin_handshake(self, responder_anywise: str) -> AgentMessage:
        existing = self.wallet.channel_with(responder_anywise)
        if existing is not None:
            if existing.state == STATE_ADMITTED:
                raise ProtocolViolation(f"already admitted with {responder_anywise}")
            # A stalled or aborted attempt is abandoned and restarted.
            del self.wallet.channels[responder_anywise]
        credential = self._presentable_credential()
        channel = Channel(
            peer_anywise=responder_anywise,
            initiated_by_me=True,
            state=STATE_INVITED,
            phase="await_presentation",
        )
        self.wallet.channels[responder_anywise] = channel
        return self._message(
            responder_anywise,
            MSG_INVITATION,
            {"credential": credential.to_json()},
            self.wallet.signer(),
        )

    def handle_credential_presentation(self, msg, channel):
        channel = self._expect_phase(channel, "await_presentation", msg)
        self._check_presented_credential(msg, channel)
        channel.my_challenge = self.services.rng.bytes(32)
        channel.phase = "await_challenge_response"
        return [
            self._message(
                channel.peer_anywise,
                MSG_CHALLENGE,
                {"nonce": b64e(channel.my_challenge)},
                self.wallet.signer(),
            )
        ]

    def handle_challenge_response(self, msg, channel):
        channel = self._expect_phase(channel, "await_challenge_response", msg)
        peer_key, _ = self.services.ledger.resolve_did(channel.peer_anywise)
        if channel.my_challenge is None or not verify_challenge_with_key(
            peer_key, channel.my_challenge, b64d(msg.body["challenge_sig"])
        ):
            raise ChallengeFailed(f"{channel.peer_anywise} failed the key-control challenge")
        channel.my_challenge = None
        if channel.initiated_by_me:
            # Peer credential checked, peer key control proven.
            channel.advance_state(STATE_VERIFIED)
            channel.phase = "await_challenge"
            return []
        channel.advance_state(STATE_VERIFIED)
        return self._offer_pairwise(channel)

    def handle_challenge(self, msg, channel):
        channel = self._expect_phase(channel, "await_challenge", msg)
        signature = sign_challenge(self.wallet.keys, b64d(msg.body["nonce"]))
        channel.phase = "await_pairwise"
        return [
            self._message(
                channel.peer_anywise,
                MSG_CHALLENGE_RESPONSE,
                {"challenge_sig": b64e(signature)},
                self.wallet.signer(),
            )
        ]

    def _offer_pairwise(self, channel: Channel) -> list[AgentMessage]:
        keys, pairwise = create_pairwise(channel.peer_anywise, rng=self.services.rng)
        channel.my_did = pairwise.did
        channel.my_keys = keys
        self.services.router.register(pairwise.did, self)
        proof = keys.sign(
            _PAIRWISE_PROOF_TAG + self.wallet.did.encode() + b"|" + pairwise.did.encode()
        )
        channel.phase = (
            "await_peer_offer" if not channel.initiated_by_me else "await_admission"
        )
        return [
            self._message(
                channel.peer_anywise,
                MSG_PAIRWISE_OFFER,
                {
                    "pairwise_did": pairwise.did,
                    "pairwise_public_key": b64e(keys.public_bytes),
                    "proof": b64e(proof),
                },
                self.wallet.signer(),
            )
        ]

    def _take_pairwise_offer(self, msg: AgentMessage, channel: Channel) -> None:
        offered_did = msg.body["pairwise_did"]
        offered_key = b64d(msg.body["pairwise_public_key"])
        if did_from_public_key(offered_key) != offered_did:
            raise ProtocolViolation("offered pairwise DID does not derive from its key")
        proof_payload = (
            _PAIRWISE_PROOF_TAG + channel.peer_anywise.encode() + b"|" + offered_did.encode()
        )
        if not verify_signature(offered_key, proof_payload, b64d(msg.body["proof"])):
            raise ProtocolViolation("pairwise offer proof invalid")
        channel.peer_pairwise_did = offered_did
        channel.peer_pairwise_key = offered_key

    def handle_pairwise_offer(self, msg, channel):
        if channel is None:
            raise ProtocolViolation("pairwise_offer without a channel")
        if channel.initiated_by_me:
            channel = self._expect_phase(channel, "await_pairwise", msg)
            self._take_pairwise_offer(msg, channel)
            out = self._offer_pairwise(channel)
            channel.advance_state(STATE_PAIRWISE)
            return out
        channel = self._expect_phase(channel, "await_peer_offer", msg)
        self._take_pairwise_offer(msg, channel)
        channel.advance_state(STATE_PAIRWISE)
        if self.issues_admission:
            return self._issue_admission(channel)
        channel.phase = "done"
        channel.advance_state(STATE_ADMITTED)
        return []

    def _issue_admission(self, channel: Channel) -> list[AgentMessage]:
        claims = self.admission_claims(channel)
        credential = self._issue_and_anchor_credential(channel.peer_pairwise_did, claims)
        channel.phase = "done"
        channel.advance_state(STATE_ADMITTED)
        return [
            self._message(
                channel.peer_pairwise_did,
                MSG_ADMISSION_CREDENTIAL,
                {"credential": credential.to_json()},
                channel.pairwise_signer(),
            )
        ]

    def admission_claims(self, channel: Channel) -> dict:
        return {"type": self.admission_claim_type}

    def _issue_and_anchor_credential(self, subject_did: str, claims: dict) -> Credential:
        from .identity import issue_credential

        credential = issue_credential(
            self.wallet.signer(), subject_did, claims, self.services.clock.now()
        )
        tx = make_transaction(
            KIND_CREDENTIAL_ANCHOR,
            {"credential_hash": credential.hash_hex(), "issuer_did": self.wallet.did},
            self.wallet.signer(),
            self.services.clock.now(),
        )
        self.services.ledger.submit(tx)
        return credential

    def handle_admission_credential(self, msg, channel):
        if channel is None or channel.peer_pairwise_did != msg.sender:
            raise ProtocolViolation("admission credential outside a pairwise channel")
        channel = self._expect_phase(channel, "await_admission", msg)
        credential = Credential.from_json(msg.body["credential"])
        if credential.subject_did != channel.my_did:
            raise CredentialInvalid("admission credential bound to the wrong DID")
        # Issuer key is the institution's anywise key; signature must verify.
        # (The anchor lands on chain in the same breath; socket-mode clients
        # may see it only after their next ledger reload.)
        issuer_key, _ = self.services.ledger.resolve_did(credential.issuer_did)
        from .canonical import canonical_bytes

        if not verify_signature(
            issuer_key, canonical_bytes(credential.signing_payload()), credential.signature
        ):
            raise CredentialInvalid("admission credential signature invalid")
        channel.admission_credential = credential
        self.wallet.credentials.append(credential)
        channel.phase = "done"
        channel.advance_state(STATE_ADMITTED)
        self.on_admitted(channel)
        return []

    def on_admitted(self, channel: Channel) -> None:
        """Hook for post-admission provisioning."""

    def _check_presented_credential(self, msg: AgentMessage, channel: Channel) -> None:
        credential = Credential.from_json(msg.body["credential"])
        if credential.subject_did != msg.sender:
            raise CredentialInvalid("presented credential is about someone else")
        ok, reason = verify_credential(credential, self.services.ledger)
        if not ok:
            raise CredentialInvalid(f"credential rejected: {reason}")
        channel.peer_credential = credential.to_json()

    def state_snapshot(self) -> bytes:
        """Serialized agent state, used by leak scans."""
        from .canonical import canonical_bytes

        return canonical_bytes(self.wallet.to_json())

    def read_record(self, cid: str) -> bytes:
        """Resolve the latest envelope, open it, fetch and decrypt the record."""
        env = fetch_current_envelope(self.services, cid)
        if self.wallet.abe_key is None:
            raise PolicyNotSatisfied(f"{self.wallet.name} holds no attribute key")
        data_key = open_envelope(env, self.wallet.abe_key)
        record_bytes = self.services.cas.get(cid)
        return decrypt_record(RecordCiphertext.from_bytes(record_bytes), data_key)


class PatientAgent(BaseAgent):
    def __init__(self, wallet, services, auto_decide=None):
        super().__init__(wallet, services)
        self.auto_decide = auto_decide

    def on_admitted(self, channel: Channel) -> None:
        # Provision the ABE attribute tied to this relationship's pairwise
        # DID directly from the deployment authority: key material never
        # rides a message.
        attr = patient_attribute(channel.my_did)
        self.services.authority.register_attribute(attr)
        held = set(self.wallet.abe_key.attributes) if self.wallet.abe_key else set()
        self.wallet.abe_key = self.services.authority.keygen(held | {attr})

    def handle_record_stored(self, msg, channel):
        if channel is None or channel.state != STATE_ADMITTED:
            raise ProtocolViolation("record notification outside an admitted channel")
        self.wallet.records.append(
            {"cid": msg.body["cid"], "version": msg.body["version"]}
        )
        return []

    def handle_consent_request(self, msg, channel):
        if channel is None or channel.state != STATE_ADMITTED:
            raise ProtocolViolation("consent request outside an admitted channel")
        parsed = ConsentRequest.from_body(msg.body, msg.body["requester_did"])
        credential = Credential.from_json(msg.body["credential"])
        ok, reason = verify_credential(credential, self.services.ledger)
        if not ok:
            raise CredentialInvalid(f"requester credential rejected: {reason}")
        request_id = self.wallet.next_request_id()
        request = {
            "request_id": request_id,
            "cid": parsed.cid,
            "attributes": sorted(parsed.requested_attributes),
            "purpose": parsed.purpose,
            "requester_did": parsed.requester_did,
            "credential": credential.to_json(),
            "hospital": channel.peer_anywise,
        }
        self.wallet.consent_requests[request_id] = request
        if self.auto_decide is not None:
            grant, attrs = self.auto_decide(request)
            return self.decide(request_id, grant, attrs)
        return []

    def decide(
        self, request_id: str, grant: bool, attrs: set[str] | None = None
    ) -> list[AgentMessage]:
        request = self.wallet.consent_requests.get(request_id)
        if request is None:
            raise ProtocolViolation(f"no pending consent request {request_id}")
        channel = self.wallet.channel_with(request["hospital"])
        if channel is None or channel.state != STATE_ADMITTED:
            raise ProtocolViolation("no admitted hospital channel for this request")
        requested = set(request["attributes"])
        chosen = requested if attrs is None else set(attrs)
        if grant and not chosen <= requested:
            raise ProtocolViolation("cannot widen a consent request beyond what was asked")
        del self.wallet.consent_requests[request_id]
        decision_record = {
            "request_id": request_id,
            "cid": request["cid"],
            "decision": "grant" if grant else "deny",
            "attributes": sorted(chosen) if grant else [],
            "at": self.services.clock.now(),
        }
        self.wallet.decisions.append(decision_record)
        body = {
            "request_ref": request_id,
            "requester_did": request["requester_did"],
            "cid": request["cid"],
            "decision": decision_record["decision"],
            "attributes": decision_record["attributes"],
            "token": None,
        }
        if grant:
            body["token"] = self.build_grant_token(channel, request["cid"], chosen).to_json()
        return [
            self._message(
                channel.peer_pairwise_did,
                MSG_CONSENT_DECISION,
                body,
                channel.pairwise_signer(),
            )
        ]

    def build_grant_token(
        self, channel: Channel, cid: str, grantee_attrs: set[str]
    ) -> RewrapToken:
        env = fetch_current_envelope(self.services, cid)
        base = strip_emergency_branch(env.policy)
        new_policy = Or(base, conjunction(grantee_attrs))
        return make_rewrap_token(
            env,
            self.wallet.abe_key,
            new_policy,
            rotate=False,
            signer=channel.pairwise_signer(),
            authority=self.services.authority,
            rng=self.services.rng,
        )

    def build_revoke_token(
        self, channel: Channel, cid: str, revoked_attrs: set[str]
    ) -> RewrapToken:
        env = fetch_current_envelope(self.services, cid)
        base = remove_attributes(strip_emergency_branch(env.policy), revoked_attrs)
        return make_rewrap_token(
            env,
            self.wallet.abe_key,
            base,
            rotate=True,
            signer=channel.pairwise_signer(),
            authority=self.services.authority,
            rng=self.services.rng,
        )


class InstitutionAgent(BaseAgent):
    """Responder role shared by the hospital and the emergency server."""

    issues_admission = True

    def handle_invitation(self, msg, channel):
        if channel is not None:
            if channel.state == STATE_ADMITTED or channel.my_did is not None:
                raise ProtocolViolation(f"second invitation from {msg.sender}")
            # Abandoned pre-pairwise attempt; let the peer start over.
            del self.wallet.channels[msg.sender]
        channel = Channel(
            peer_anywise=msg.sender,
            initiated_by_me=False,
            state=STATE_INVITED,
            phase="await_challenge",
        )
        self.wallet.channels[msg.sender] = channel
        channel.seen_nonces.add(b64e(msg.nonce))
        self._check_presented_credential(msg, channel)
        return [
            self._message(
                msg.sender,
                MSG_CREDENTIAL_PRESENTATION,
                {"credential": self._presentable_credential().to_json()},
                self.wallet.signer(),
            )
        ]

    def handle_challenge(self, msg, channel):
        # Answer the initiator's challenge and pose our own.
        channel = self._expect_phase(channel, "await_challenge", msg)
        signature = sign_challenge(self.wallet.keys, b64d(msg.body["nonce"]))
        channel.my_challenge = self.services.rng.bytes(32)
        channel.phase = "await_challenge_response"
        return [
            self._message(
                channel.peer_anywise,
                MSG_CHALLENGE_RESPONSE,
                {"challenge_sig": b64e(signature)},
                self.wallet.signer(),
            ),
            self._message(
                channel.peer_anywise,
                MSG_CHALLENGE,
                {"nonce": b64e(channel.my_challenge)},
                self.wallet.signer(),
            ),
        ]


class HospitalAgent(InstitutionAgent):
    admission_claim_type = "admission"

    def admission_claims(self, channel: Channel) -> dict:
        peer_cred = channel.peer_credential or {}
        kind = peer_cred.get("claims", {}).get("type", "identity")
        return {
            "type": "admission",
            "holder_kind": "doctor" if kind == "license" else "patient",
            "hospital": self.wallet.name,
        }

    # --- proxy duties ---

    def _resolve_authorizer_key(self, did: str) -> bytes:
        channel = self.wallet.channel_by_pairwise_peer(did)
        if channel is not None and channel.peer_pairwise_key is not None:
            return channel.peer_pairwise_key
        if self.services.ledger.has_did(did):
            return self.services.ledger.resolve_did(did)[0]
        raise KeyError(did)

    def _apply_and_anchor(self, token: RewrapToken, authorized_by_anywise: str) -> KeyEnvelope:
        old_env = fetch_current_envelope(self.services, token.cid)
        new_env = apply_rewrap(old_env, token, self._resolve_authorizer_key)
        env_bytes = new_env.to_bytes()
        self.services.cas.put(env_bytes)
        tx = make_transaction(
            KIND_KEY_ANCHOR,
            {
                "cid": new_env.cid,
                "envelope_hash": sha256_hex(env_bytes),
                "version": new_env.version,
                "authorized_by_did": authorized_by_anywise,
            },
            self.wallet.signer(),
            self.services.clock.now(),
        )
        self.services.ledger.submit(tx)
        return new_env

    def handle_rewrap_token(self, msg, channel):
        if channel is None or channel.state != STATE_ADMITTED:
            raise ProtocolViolation("rewrap token outside an admitted channel")
        token = RewrapToken.from_json(msg.body["token"])
        if token.authorized_by != msg.sender:
            raise ProtocolViolation("token authorizer does not match message sender")
        self._apply_and_anchor(token, channel.peer_anywise)
        return []

    def handle_consent_decision(self, msg, channel):
        if channel is None or channel.state != STATE_ADMITTED:
            raise ProtocolViolation("consent decision outside an admitted channel")
        requester_channel = self.wallet.channel_by_pairwise_peer(msg.body["requester_did"])
        if requester_channel is None or requester_channel.state != STATE_ADMITTED:
            raise ProtocolViolation("decision names an unknown requester")
        version = None
        if msg.body["decision"] == "grant":
            token = RewrapToken.from_json(msg.body["token"])
            if token.authorized_by != msg.sender:
                raise ProtocolViolation("token authorizer does not match message sender")
            new_env = self._apply_and_anchor(token, channel.peer_anywise)
            version = new_env.version
        return [
            self._message(
                requester_channel.peer_pairwise_did,
                MSG_CONSENT_DECISION,
                {
                    "cid": msg.body["cid"],
                    "decision": msg.body["decision"],
                    "attributes": msg.body["attributes"],
                    "version": version,
                },
                requester_channel.pairwise_signer(),
            )
        ]

    def store_record(self, patient_anywise: str, plaintext: bytes) -> tuple[str, KeyEnvelope]:
        """Encrypt, store, anchor, seal to the patient, anchor the envelope."""
        if not plaintext:
            raise EmptyObject("refusing to store an empty record")
        channel = self.wallet.channel_with(patient_anywise)
        if channel is None or channel.state != STATE_ADMITTED:
            raise ProtocolViolation(f"no admitted channel with {patient_anywise}")
        record_ct, data_key = encrypt_record(plaintext)
        cid = self.services.cas.put(record_ct.to_bytes())
        self.services.ledger.submit(
            make_transaction(
                KIND_RECORD_ANCHOR,
                {"cid": cid, "patient_did": patient_anywise},
                self.wallet.signer(),
                self.services.clock.now(),
            )
        )
        policy = Attr(patient_attribute(channel.peer_pairwise_did))
        env = seal_envelope(
            data_key, policy, self.services.authority, cid, version=1, rng=self.services.rng
        )
        env_bytes = env.to_bytes()
        self.services.cas.put(env_bytes)
        self.services.ledger.submit(
            make_transaction(
                KIND_KEY_ANCHOR,
                {
                    "cid": cid,
                    "envelope_hash": sha256_hex(env_bytes),
                    "version": 1,
                    "authorized_by_did": self.wallet.did,
                },
                self.wallet.signer(),
                self.services.clock.now(),
            )
        )
        self.services.router.dispatch(
            [
                self._message(
                    channel.peer_pairwise_did,
                    MSG_RECORD_STORED,
                    {"cid": cid, "version": 1},
                    channel.pairwise_signer(),
                )
            ]
        )
        return cid, env

    def handle_consent_request(self, msg, channel):
        if channel is None or channel.state != STATE_ADMITTED:
            raise ProtocolViolation("consent request outside an admitted channel")
        request = ConsentRequest.from_body(msg.body, msg.sender)
        anchor = self.services.ledger.record_anchor(request.cid)
        if anchor is None:
            raise UnknownCid(f"no record anchored at {request.cid}")
        patient_channel = self.wallet.channel_with(anchor.body["patient_did"])
        if patient_channel is None or patient_channel.state != STATE_ADMITTED:
            raise ProtocolViolation("no admitted channel with the record's patient")
        return [
            self._message(
                patient_channel.peer_pairwise_did,
                MSG_CONSENT_REQUEST,
                {
                    "cid": request.cid,
                    "attributes": sorted(request.requested_attributes),
                    "purpose": request.purpose,
                    "credential": msg.body["credential"],
                    "requester_did": request.requester_did,
                },
                patient_channel.pairwise_signer(),
            )
        ]


class DoctorAgent(BaseAgent):
    def handle_consent_decision(self, msg, channel):
        if channel is None or channel.state != STATE_ADMITTED:
            raise ProtocolViolation("consent decision outside an admitted channel")
        self.wallet.decisions.append(
            {
                "cid": msg.body["cid"],
                "decision": msg.body["decision"],
                "attributes": msg.body["attributes"],
                "version": msg.body.get("version"),
            }
        )
        return []

    def handle_emergency_grant(self, msg, channel):
        if channel is None or channel.state != STATE_ADMITTED:
            raise ProtocolViolation("emergency grant outside an admitted channel")
        self.wallet.decisions.append(
            {
                "cid": msg.body["cid"],
                "decision": "emergency_grant",
                "version": msg.body["version"],
            }
        )
        return []


class EmergencyServerAgent(InstitutionAgent):
    admission_claim_type = "emergency_admission"

    def admission_claims(self, channel: Channel) -> dict:
        return {"type": "emergency_admission", "server": self.wallet.name}

    def handle_emergency_request(self, msg, channel):
        if channel is None or channel.state != STATE_ADMITTED:
            raise ChannelNotAuthenticated("emergency request outside an admitted channel")
        cid = msg.body["cid"]
        attributes = set(msg.body["attributes"])
        if not attributes:
            raise ProtocolViolation("emergency request with no requester attributes")
        env = fetch_current_envelope(self.services, cid)
        base = strip_emergency_branch(env.policy)
        new_policy = Or(base, conjunction(attributes))
        token = make_rewrap_token(
            env,
            self.wallet.abe_key,
            new_policy,
            rotate=False,
            signer=self.wallet.signer(),
            authority=self.services.authority,
            rng=self.services.rng,
        )
        new_env = apply_rewrap(
            env, token, lambda did: self.services.ledger.resolve_did(did)[0]
        )
        env_bytes = new_env.to_bytes()
        self.services.cas.put(env_bytes)
        # Accountability first, then the anchor; the audit pairing checker
        # holds the two together (true two-phase commit is out of scope).
        self.services.ledger.submit(
            make_transaction(
                KIND_EMERGENCY_ACCESS,
                {
                    "cid": cid,
                    "requester_did": channel.peer_anywise,
                    "server_did": self.wallet.did,
                    "justification_hash": sha256_hex(
                        msg.body["justification"].encode("utf-8")
                    ),
                },
                self.wallet.signer(),
                self.services.clock.now(),
            )
        )
        self.services.ledger.submit(
            make_transaction(
                KIND_KEY_ANCHOR,
                {
                    "cid": cid,
                    "envelope_hash": sha256_hex(env_bytes),
                    "version": new_env.version,
                    "authorized_by_did": self.wallet.did,
                },
                self.wallet.signer(),
                self.services.clock.now(),
            )
        )
        return [
            self._message(
                channel.peer_pairwise_did,
                MSG_EMERGENCY_GRANT,
                {"cid": cid, "version": new_env.version},
                channel.pairwise_signer(),
            )
        ]


# --- orchestrated operations ---

def handshake(initiator: BaseAgent, responder: BaseAgent) -> tuple[Channel, Channel]:
    """Run the mutual-authentication flow to completion for both sides."""
    opening = initiator.begin_handshake(responder.wallet.did)
    initiator.services.router.dispatch([opening])
    mine = initiator.wallet.channel_with(responder.wallet.did)
    theirs = responder.wallet.channel_with(initiator.wallet.did)
    if mine is None or theirs is None:
        raise ProtocolViolation("handshake did not establish both sessions")
    if mine.state != STATE_ADMITTED or theirs.state != STATE_ADMITTED:
        raise ProtocolViolation("handshake stalled before admission")
    return mine, theirs


def store_record(
    hospital: HospitalAgent, patient_anywise: str, plaintext: bytes
) -> tuple[str, KeyEnvelope]:
    return hospital.store_record(patient_anywise, plaintext)


def grant_access(
    patient: PatientAgent, hospital: HospitalAgent, cid: str, grantee_attrs: set[str]
) -> KeyEnvelope:
    """Patient-initiated policy widening; retries on concurrent version bumps."""
    channel = patient.wallet.channel_with(hospital.wallet.did)
    if channel is None or channel.state != STATE_ADMITTED:
        raise ProtocolViolation("patient is not admitted at this hospital")
    for attempt in range(MAX_GRANT_RETRIES):
        token = patient.build_grant_token(channel, cid, set(grantee_attrs))
        msg = patient._message(
            channel.peer_pairwise_did,
            MSG_REWRAP_TOKEN,
            {"token": token.to_json()},
            channel.pairwise_signer(),
        )
        try:
            patient.services.router.dispatch([msg])
            return fetch_current_envelope(patient.services, cid)
        except VersionGap:
            if attempt == MAX_GRANT_RETRIES - 1:
                raise
    raise AssertionError("unreachable")


def revoke_access(
    patient: PatientAgent, hospital: HospitalAgent, cid: str, revoked_attrs: set[str]
) -> KeyEnvelope:
    """Patient-initiated revocation: prunes the leaves and rotates the KEK."""
    channel = patient.wallet.channel_with(hospital.wallet.did)
    if channel is None or channel.state != STATE_ADMITTED:
        raise ProtocolViolation("patient is not admitted at this hospital")
    for attempt in range(MAX_GRANT_RETRIES):
        token = patient.build_revoke_token(channel, cid, set(revoked_attrs))
        msg = patient._message(
            channel.peer_pairwise_did,
            MSG_REWRAP_TOKEN,
            {"token": token.to_json()},
            channel.pairwise_signer(),
        )
        try:
            patient.services.router.dispatch([msg])
            return fetch_current_envelope(patient.services, cid)
        except VersionGap:
            if attempt == MAX_GRANT_RETRIES - 1:
                raise
    raise AssertionError("unreachable")


def access_record(doctor: DoctorAgent, cid: str) -> bytes:
    return doctor.read_record(cid)


def request_access(
    doctor: DoctorAgent, hospital: HospitalAgent, cid: str, purpose: str = ""
) -> None:
    """Doctor asks; the hospital relays to the record's patient."""
    channel = doctor.wallet.channel_with(hospital.wallet.did)
    if channel is None or channel.state != STATE_ADMITTED:
        raise ProtocolViolation("doctor has no admitted channel with the hospital")
    credential = doctor.wallet.find_credential("license")
    if credential is None:
        raise CredentialInvalid("doctor holds no license credential")
    attributes = sorted(doctor.wallet.abe_key.attributes) if doctor.wallet.abe_key else []
    msg = doctor._message(
        channel.peer_pairwise_did,
        MSG_CONSENT_REQUEST,
        {
            "cid": cid,
            "attributes": attributes,
            "purpose": purpose,
            "credential": credential.to_json(),
        },
        channel.pairwise_signer(),
    )
    doctor.services.router.dispatch([msg])


def decide_consent(
    patient: PatientAgent,
    request_id: str,
    grant: bool,
    attrs: set[str] | None = None,
) -> None:
    """Send the patient's decision; grants retry through version races."""
    request = patient.wallet.consent_requests.get(request_id)
    if request is None:
        raise ProtocolViolation(f"no pending consent request {request_id}")
    for attempt in range(MAX_GRANT_RETRIES):
        try:
            patient.services.router.dispatch(patient.decide(request_id, grant, attrs))
            return
        except VersionGap:
            if attempt == MAX_GRANT_RETRIES - 1:
                raise
            patient.wallet.consent_requests[request_id] = request


def emergency_access(
    doctor: DoctorAgent, server: EmergencyServerAgent, cid: str, justification: str
) -> KeyEnvelope:
    """Override path for an unresponsive patient; always leaves an audit pair."""
    channel = doctor.wallet.channel_with(server.wallet.did)
    if channel is None or channel.state != STATE_ADMITTED:
        raise ChannelNotAuthenticated("no authenticated channel with the emergency server")
    attributes = sorted(doctor.wallet.abe_key.attributes) if doctor.wallet.abe_key else []
    msg = doctor._message(
        channel.peer_pairwise_did,
        MSG_EMERGENCY_REQUEST,
        {"cid": cid, "justification": justification, "attributes": attributes},
        channel.pairwise_signer(),
    )
    doctor.services.router.dispatch([msg])
    return fetch_current_envelope(doctor.services, cid)


def relay_consent_request(
    hospital: HospitalAgent,
    patient: PatientAgent,
    doctor: DoctorAgent,
    cid: str,
    purpose: str = "",
) -> dict:
    """Full request/decide round trip; returns the patient's recorded decision."""
    before = len(patient.wallet.decisions)
    request_access(doctor, hospital, cid, purpose)
    if len(patient.wallet.decisions) > before:
        return patient.wallet.decisions[-1]
    return {"decision": "pending", "pending": list(patient.wallet.consent_requests)}
