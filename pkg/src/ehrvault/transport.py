"""Message framing and delivery.

An AgentMessage is one signed protocol step between two wallets. The wire
form is a 4-byte big-endian length prefix followed by canonical JSON; the
in-process router and the local stream socket both carry exactly those
bytes, so tests and the multi-process demo exercise the same encoding.
"""

from __future__ import annotations

import json
import socket
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from .canonical import b64d, b64e, canonical_bytes
from .errors import ProtocolViolation
from .identity import KeyPair

MAX_FRAME = 4 * 1024 * 1024

MSG_INVITATION = "invitation"
MSG_CREDENTIAL_PRESENTATION = "credential_presentation"
MSG_CHALLENGE = "challenge"
MSG_CHALLENGE_RESPONSE = "challenge_response"
MSG_PAIRWISE_OFFER = "pairwise_offer"
MSG_ADMISSION_CREDENTIAL = "admission_credential"
MSG_RECORD_STORED = "record_stored"
MSG_CONSENT_REQUEST = "consent_request"
MSG_CONSENT_DECISION = "consent_decision"
MSG_REWRAP_TOKEN = "rewrap_token"
MSG_EMERGENCY_REQUEST = "emergency_request"
MSG_EMERGENCY_GRANT = "emergency_grant"
MSG_ERROR = "error"

HANDSHAKE_TYPES = {
    MSG_INVITATION,
    MSG_CREDENTIAL_PRESENTATION,
    MSG_CHALLENGE,
    MSG_CHALLENGE_RESPONSE,
    MSG_PAIRWISE_OFFER,
    MSG_ADMISSION_CREDENTIAL,
}


@dataclass(frozen=True)
class AgentMessage:
    sender: str
    recipient: str
    type: str
    body: dict
    nonce: bytes
    signature: bytes

    def signing_payload(self) -> dict:
        return {
            "from": self.sender,
            "to": self.recipient,
            "type": self.type,
            "body": self.body,
            "nonce": b64e(self.nonce),
        }

    def to_json(self) -> dict:
        data = self.signing_payload()
        data["signature"] = b64e(self.signature)
        return data

    def to_wire_bytes(self) -> bytes:
        return canonical_bytes(self.to_json())

    @classmethod
    def from_json(cls, data: dict) -> "AgentMessage":
        return cls(
            sender=data["from"],
            recipient=data["to"],
            type=data["type"],
            body=dict(data["body"]),
            nonce=b64d(data["nonce"]),
            signature=b64d(data["signature"]),
        )

    @classmethod
    def from_wire_bytes(cls, data: bytes) -> "AgentMessage":
        try:
            return cls.from_json(json.loads(data.decode("utf-8")))
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolViolation(f"unparseable message: {exc}") from exc


def sign_message(
    sender: str, recipient: str, type_: str, body: dict, nonce: bytes, keys: KeyPair
) -> AgentMessage:
    unsigned = AgentMessage(
        sender=sender, recipient=recipient, type=type_, body=body, nonce=nonce, signature=b""
    )
    signature = keys.sign(canonical_bytes(unsigned.signing_payload()))
    return AgentMessage(
        sender=sender,
        recipient=recipient,
        type=type_,
        body=body,
        nonce=nonce,
        signature=signature,
    )


class Transcript:
    """Append-only log of every message moved, for audits and leak scans."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.entries: list[dict] = []
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self.entries.append(json.loads(line))

    def append(self, msg: AgentMessage) -> None:
        entry = {
            "seq": len(self.entries),
            "from": msg.sender,
            "to": msg.recipient,
            "type": msg.type,
            "wire": b64e(msg.to_wire_bytes()),
        }
        self.entries.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(canonical_bytes(entry).decode("utf-8") + "\n")

    def all_bytes(self) -> bytes:
        return b"".join(b64d(entry["wire"]) for entry in self.entries)

    def messages(self) -> list[AgentMessage]:
        return [AgentMessage.from_wire_bytes(b64d(e["wire"])) for e in self.entries]


class Router:
    """In-process delivery: FIFO pump over registered agent inboxes."""

    def __init__(self, transcript: Transcript | None = None):
        self.transcript = transcript if transcript is not None else Transcript()
        self._agents: dict[str, object] = {}

    def register(self, did: str, agent) -> None:
        self._agents[did] = agent

    def dispatch(self, messages: list[AgentMessage]) -> None:
        queue = deque(messages)
        while queue:
            msg = queue.popleft()
            self.transcript.append(msg)
            agent = self._agents.get(msg.recipient)
            if agent is None:
                raise ProtocolViolation(f"no route to {msg.recipient}")
            queue.extend(agent.receive(msg))


# --- framed stream socket transport ---

def encode_frame(data: bytes) -> bytes:
    if len(data) > MAX_FRAME:
        raise ProtocolViolation(f"frame too large: {len(data)} bytes")
    return len(data).to_bytes(4, "big") + data


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> bytes | None:
    header = _read_exact(sock, 4)
    if header is None:
        return None
    length = int.from_bytes(header, "big")
    if length > MAX_FRAME:
        raise ProtocolViolation(f"frame too large: {length} bytes")
    return _read_exact(sock, length)


def send_message(sock: socket.socket, msg: AgentMessage) -> None:
    sock.sendall(encode_frame(msg.to_wire_bytes()))


def recv_message(sock: socket.socket) -> AgentMessage | None:
    frame = read_frame(sock)
    if frame is None:
        return None
    return AgentMessage.from_wire_bytes(frame)
