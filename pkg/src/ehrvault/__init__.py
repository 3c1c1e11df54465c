"""Desk-scale self-sovereign EHR exchange.

Patients, hospitals, doctors, and an emergency server exchange encrypted
health records through a content-addressed store. Consent is enforced by
ciphertext-policy attribute-based encryption over the record keys, and
every identity, consent change, and emergency access is anchored on a
hash-chained ledger.
"""

from .abe import (
    AbeAuthority,
    AbeCiphertext,
    AbeMasterKey,
    AbePublicParams,
    AbeUserKey,
    abe_decrypt,
    abe_encrypt,
    keygen,
    setup,
)
from .cas import FileCas, MemoryCas, make_cid
from .envelope import (
    DataKey,
    KeyEnvelope,
    RecordCiphertext,
    RewrapToken,
    apply_rewrap,
    decrypt_record,
    derive_data_key,
    encrypt_record,
    make_rewrap_token,
    open_envelope,
    seal_envelope,
)
from .identity import (
    Credential,
    DidDocument,
    KeyPair,
    Signer,
    create_identity,
    create_pairwise,
    issue_credential,
    verify_credential,
)
from .ledger import Block, Ledger, Transaction, make_transaction
from .policy import (
    And,
    Attr,
    Or,
    Policy,
    parse_policy,
    policy_to_string,
    satisfies,
)

__all__ = [
    "AbeAuthority",
    "AbeCiphertext",
    "AbeMasterKey",
    "AbePublicParams",
    "AbeUserKey",
    "And",
    "Attr",
    "Block",
    "Credential",
    "DataKey",
    "DidDocument",
    "FileCas",
    "KeyEnvelope",
    "KeyPair",
    "Ledger",
    "MemoryCas",
    "Or",
    "Policy",
    "RecordCiphertext",
    "RewrapToken",
    "Signer",
    "Transaction",
    "abe_decrypt",
    "abe_encrypt",
    "apply_rewrap",
    "create_identity",
    "create_pairwise",
    "decrypt_record",
    "derive_data_key",
    "encrypt_record",
    "issue_credential",
    "keygen",
    "make_cid",
    "make_rewrap_token",
    "make_transaction",
    "open_envelope",
    "parse_policy",
    "policy_to_string",
    "satisfies",
    "seal_envelope",
    "setup",
    "verify_credential",
]

__version__ = "0.1.0"
