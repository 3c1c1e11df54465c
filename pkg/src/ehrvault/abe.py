"""Ciphertext-policy attribute-based encryption over policy trees.

Construction: a deployment authority holds a 256-bit master seed. Every
attribute name maps to a 128-bit key via HMAC-SHA256 of the seed, and a user
key is simply the bag of attribute keys for the attributes the user was
issued. Encrypting a 128-bit payload to a policy shares it down the tree:
an AND node XOR-splits its share in two, an OR node copies its share to both
children, and each leaf AEAD-encrypts its share under that attribute's key.
Decryption reconstructs bottom-up from the leaves the user can open, so it
succeeds exactly when the attribute set satisfies the policy.

Two desk-scale properties are deliberate and documented rather than fixed:

* No collusion resistance. Attribute secrets are not bound to a user, so
  two users holding ``a`` and ``b`` separately can pool keys and jointly
  satisfy ``a AND b``. A pairing-based scheme behind these same operations
  would remove this.
* Encrypting to a policy needs the per-attribute wrap keys (here identical
  to the attribute secrets), so sealing goes through the authority handle
  rather than public parameters alone.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from typing import Iterable, Mapping, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .canonical import b64d, b64e, canonical_bytes
from .errors import (
    EmptyAttributeSet,
    EmptyUniverse,
    MalformedPolicy,
    PolicyNotSatisfied,
    ShareCorrupt,
    UnknownAttribute,
)
from .policy import (
    And,
    Attr,
    Policy,
    is_valid_attribute_name,
    leaf_names,
    parse_policy,
    policy_to_string,
    satisfies,
    validate_policy,
)
from .rng import SystemRng

SHARE_LEN = 16
ATTR_KEY_LEN = 16
NONCE_LEN = 12
SCHEME_VERSION = 1

_SYSTEM_RNG = SystemRng()


@dataclass(frozen=True)
class AbeMasterKey:
    seed: bytes

    def __post_init__(self):
        if len(self.seed) != 32:
            raise ValueError("master seed must be 32 bytes")


@dataclass(frozen=True)
class AbePublicParams:
    authority_id: str
    scheme_version: int = SCHEME_VERSION


@dataclass(frozen=True)
class AbeUserKey:
    attributes: frozenset[str]
    secrets: Mapping[str, bytes]

    def to_json(self) -> dict:
        return {
            "attributes": sorted(self.attributes),
            "secrets": {name: b64e(sec) for name, sec in sorted(self.secrets.items())},
        }

    @classmethod
    def from_json(cls, data: dict) -> "AbeUserKey":
        secrets = {name: b64d(sec) for name, sec in data["secrets"].items()}
        return cls(attributes=frozenset(data["attributes"]), secrets=secrets)


@dataclass(frozen=True)
class LeafShare:
    name: str
    share_ct: bytes


@dataclass(frozen=True)
class NodeShare:
    op: str  # "and" | "or"
    left: "ShareNode"
    right: "ShareNode"


ShareNode = Union[LeafShare, NodeShare]


@dataclass(frozen=True)
class AbeCiphertext:
    policy: Policy
    payload_nonce: bytes
    root: ShareNode

    def to_json(self) -> dict:
        return {
            "policy": policy_to_string(self.policy),
            "payload_nonce": b64e(self.payload_nonce),
            "root": _node_to_json(self.root),
        }

    def to_bytes(self) -> bytes:
        return canonical_bytes(self.to_json())

    @classmethod
    def from_json(cls, data: dict) -> "AbeCiphertext":
        policy = parse_policy(data["policy"])
        root = _node_from_json(data["root"])
        ct = cls(policy=policy, payload_nonce=b64d(data["payload_nonce"]), root=root)
        if not _mirrors(policy, root):
            raise MalformedPolicy("share tree does not mirror the policy tree")
        return ct


def _node_to_json(node: ShareNode) -> dict:
    if isinstance(node, LeafShare):
        return {"type": "attr", "name": node.name, "share_ct": b64e(node.share_ct)}
    return {
        "type": node.op,
        "left": _node_to_json(node.left),
        "right": _node_to_json(node.right),
    }


def _node_from_json(data: dict) -> ShareNode:
    kind = data.get("type")
    if kind == "attr":
        return LeafShare(name=data["name"], share_ct=b64d(data["share_ct"]))
    if kind in ("and", "or"):
        return NodeShare(
            op=kind, left=_node_from_json(data["left"]), right=_node_from_json(data["right"])
        )
    raise MalformedPolicy(f"unknown share node type: {kind!r}")


def _mirrors(policy: Policy, node: ShareNode) -> bool:
    if isinstance(policy, Attr):
        return isinstance(node, LeafShare) and node.name == policy.name
    want = "and" if isinstance(policy, And) else "or"
    return (
        isinstance(node, NodeShare)
        and node.op == want
        and _mirrors(policy.left, node.left)
        and _mirrors(policy.right, node.right)
    )


# --- scheme operations ---

def setup(security_seed: bytes, attribute_universe: Iterable[str]) -> tuple[AbeMasterKey, AbePublicParams]:
    """Derive a master key and public parameters; deterministic in the seed."""
    universe = set(attribute_universe)
    if not universe:
        raise EmptyUniverse("attribute universe must be non-empty")
    for name in universe:
        if not is_valid_attribute_name(name):
            raise MalformedPolicy(f"invalid attribute name in universe: {name!r}")
    msk = AbeMasterKey(seed=hashlib.sha256(b"abe-master|" + security_seed).digest())
    authority_id = hashlib.sha256(b"abe-authority|" + security_seed).hexdigest()[:16]
    return msk, AbePublicParams(authority_id=authority_id)


def attribute_key(msk: AbeMasterKey, name: str) -> bytes:
    return hmac.new(msk.seed, b"attr|" + name.encode("utf-8"), hashlib.sha256).digest()[:ATTR_KEY_LEN]


def keygen(msk: AbeMasterKey, attrs: Iterable[str]) -> AbeUserKey:
    """Issue a user key holding exactly the requested attribute secrets."""
    names = set(attrs)
    if not names:
        raise EmptyAttributeSet("cannot issue a key for no attributes")
    for name in names:
        if not is_valid_attribute_name(name):
            raise MalformedPolicy(f"invalid attribute name: {name!r}")
    return AbeUserKey(
        attributes=frozenset(names),
        secrets={name: attribute_key(msk, name) for name in names},
    )


class AbeAuthority:
    """The deployment's single attribute authority.

    Owns the master key and the attribute universe; issues user keys and
    supplies the per-attribute wrap keys that encryption needs. The universe
    grows as agents register departments, roles, and per-patient attributes.
    """

    def __init__(self, msk: AbeMasterKey, params: AbePublicParams, universe: set[str]):
        self.msk = msk
        self.params = params
        self.universe = set(universe)

    @classmethod
    def setup(cls, security_seed: bytes, attribute_universe: Iterable[str]) -> "AbeAuthority":
        msk, params = setup(security_seed, attribute_universe)
        return cls(msk, params, set(attribute_universe))

    def register_attribute(self, name: str) -> None:
        if not is_valid_attribute_name(name):
            raise MalformedPolicy(f"invalid attribute name: {name!r}")
        self.universe.add(name)

    def keygen(self, attrs: Iterable[str]) -> AbeUserKey:
        names = set(attrs)
        unknown = names - self.universe
        if unknown:
            raise UnknownAttribute(sorted(unknown)[0])
        return keygen(self.msk, names)

    def to_json(self) -> dict:
        return {
            "authority_id": self.params.authority_id,
            "scheme_version": self.params.scheme_version,
            "master_seed": b64e(self.msk.seed),
            "universe": sorted(self.universe),
        }

    @classmethod
    def from_json(cls, data: dict) -> "AbeAuthority":
        msk = AbeMasterKey(seed=b64d(data["master_seed"]))
        params = AbePublicParams(
            authority_id=data["authority_id"], scheme_version=data["scheme_version"]
        )
        return cls(msk, params, set(data["universe"]))


def _leaf_nonce(payload_nonce: bytes, path: str) -> bytes:
    return hashlib.sha256(payload_nonce + b"|" + path.encode("ascii")).digest()[:NONCE_LEN]


def _leaf_aad(path: str, name: str, policy_text: str) -> bytes:
    # Binds each leaf to its position and the whole policy so leaves cannot
    # be transplanted between ciphertexts or shuffled within one.
    return canonical_bytes(["abe-share", path, name, policy_text])


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def abe_encrypt(payload: bytes, policy: Policy, authority: AbeAuthority, rng=None) -> AbeCiphertext:
    """Share `payload` down the policy tree; leaves sealed per-attribute."""
    if len(payload) != SHARE_LEN:
        raise ValueError(f"payload must be {SHARE_LEN} bytes")
    validate_policy(policy)
    unknown = leaf_names(policy) - authority.universe
    if unknown:
        raise UnknownAttribute(sorted(unknown)[0])
    rng = rng or _SYSTEM_RNG
    payload_nonce = rng.bytes(NONCE_LEN)
    policy_text = policy_to_string(policy)

    def build(node: Policy, share: bytes, path: str) -> ShareNode:
        if isinstance(node, Attr):
            key = attribute_key(authority.msk, node.name)
            ct = AESGCM(key).encrypt(
                _leaf_nonce(payload_nonce, path),
                share,
                _leaf_aad(path, node.name, policy_text),
            )
            return LeafShare(name=node.name, share_ct=ct)
        if isinstance(node, And):
            r = rng.bytes(SHARE_LEN)
            return NodeShare(
                op="and",
                left=build(node.left, r, path + "0"),
                right=build(node.right, _xor(share, r), path + "1"),
            )
        return NodeShare(
            op="or",
            left=build(node.left, share, path + "0"),
            right=build(node.right, share, path + "1"),
        )

    return AbeCiphertext(policy=policy, payload_nonce=payload_nonce, root=build(policy, payload, "r"))


def abe_decrypt(ct: AbeCiphertext, user_key: AbeUserKey) -> bytes:
    """Reconstruct the payload, or raise.

    PolicyNotSatisfied when the attribute set structurally cannot open the
    tree; ShareCorrupt when it should have (some leaf the user can open
    failed authentication, which signals tampering).
    """
    policy_text = policy_to_string(ct.policy)

    def recover(pnode: Policy, snode: ShareNode, path: str) -> bytes | None:
        if isinstance(pnode, Attr):
            assert isinstance(snode, LeafShare)
            secret = user_key.secrets.get(pnode.name)
            if secret is None:
                return None
            try:
                return AESGCM(secret).decrypt(
                    _leaf_nonce(ct.payload_nonce, path),
                    snode.share_ct,
                    _leaf_aad(path, pnode.name, policy_text),
                )
            except InvalidTag:
                return None
        assert isinstance(snode, NodeShare)
        if isinstance(pnode, And):
            left = recover(pnode.left, snode.left, path + "0")
            if left is None:
                return None
            right = recover(pnode.right, snode.right, path + "1")
            if right is None:
                return None
            return _xor(left, right)
        left = recover(pnode.left, snode.left, path + "0")
        if left is not None:
            return left
        return recover(pnode.right, snode.right, path + "1")

    payload = recover(ct.policy, ct.root, "r")
    if payload is not None:
        return payload
    if satisfies(ct.policy, user_key.attributes):
        raise ShareCorrupt("policy satisfied but share reconstruction failed")
    raise PolicyNotSatisfied(
        f"attributes do not satisfy policy {policy_text}"
    )
