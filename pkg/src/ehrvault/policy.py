"""Monotone boolean access policies over namespaced attributes.

Grammar (AND binds tighter than OR, both left-associative)::

    expr   := term ('OR' term)*
    term   := factor ('AND' factor)*
    factor := NAME | '(' expr ')'

Attribute names follow ``kind`` or ``kind:value``, e.g. ``dept:cardiology``,
``role:doctor``, ``emergency:override``. Policies are monotone: there is no
negation, so adding attributes to a set can only widen what it satisfies.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Union

from .errors import AttributeNotInPolicy, MalformedPolicy, ParseError

ATTRIBUTE_NAME_RE = re.compile(r"[a-z][a-z0-9_]*(:[a-zA-Z0-9._-]+)?\Z")
MAX_POLICY_DEPTH = 32

# Branch implicitly added to every sealed envelope; only the emergency
# server is ever issued this attribute secret.
EMERGENCY_OVERRIDE = "emergency:override"


@dataclass(frozen=True)
class Attr:
    name: str


@dataclass(frozen=True)
class And:
    left: "Policy"
    right: "Policy"


@dataclass(frozen=True)
class Or:
    left: "Policy"
    right: "Policy"


Policy = Union[Attr, And, Or]


def is_valid_attribute_name(name: str) -> bool:
    return bool(ATTRIBUTE_NAME_RE.match(name))


def policy_depth(policy: Policy) -> int:
    if isinstance(policy, Attr):
        return 1
    return 1 + max(policy_depth(policy.left), policy_depth(policy.right))


def leaf_names(policy: Policy) -> set[str]:
    if isinstance(policy, Attr):
        return {policy.name}
    return leaf_names(policy.left) | leaf_names(policy.right)


def validate_policy(policy: Policy) -> None:
    """Reject trees with bad leaf names, unknown node types, or excess depth."""

    def check(node: Policy, depth: int) -> None:
        if depth > MAX_POLICY_DEPTH:
            raise MalformedPolicy(f"policy tree deeper than {MAX_POLICY_DEPTH}")
        if isinstance(node, Attr):
            if not is_valid_attribute_name(node.name):
                raise MalformedPolicy(f"invalid attribute name: {node.name!r}")
        elif isinstance(node, (And, Or)):
            check(node.left, depth + 1)
            check(node.right, depth + 1)
        else:
            raise MalformedPolicy(f"not a policy node: {node!r}")

    check(policy, 1)


def satisfies(policy: Policy, attrs: Iterable[str]) -> bool:
    """Standard monotone evaluation: a leaf is true iff its name is held."""
    held = set(attrs)

    def ev(node: Policy) -> bool:
        if isinstance(node, Attr):
            return node.name in held
        if isinstance(node, And):
            return ev(node.left) and ev(node.right)
        return ev(node.left) or ev(node.right)

    return ev(policy)


def policy_to_string(policy: Policy) -> str:
    """Fully parenthesized canonical form; parses back to an equal tree."""
    if isinstance(policy, Attr):
        return policy.name
    op = "AND" if isinstance(policy, And) else "OR"
    return f"({policy_to_string(policy.left)} {op} {policy_to_string(policy.right)})"


# --- parsing ---

_WORD_RE = re.compile(r"[A-Za-z0-9_.:\-]+")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    i = 0
    while i < len(text):
        c = text[i]
        if c.isspace():
            i += 1
            continue
        offset = len(text[:i].encode("utf-8"))
        if c == "(":
            tokens.append(("lparen", "(", offset))
            i += 1
            continue
        if c == ")":
            tokens.append(("rparen", ")", offset))
            i += 1
            continue
        m = _WORD_RE.match(text, i)
        if not m:
            raise ParseError(
                f"unexpected character {c!r} at byte {offset}",
                offset=offset,
                expected=("NAME", "AND", "OR", "(", ")"),
            )
        word = m.group(0)
        if word == "AND":
            tokens.append(("and", word, offset))
        elif word == "OR":
            tokens.append(("or", word, offset))
        elif is_valid_attribute_name(word):
            tokens.append(("name", word, offset))
        else:
            raise ParseError(
                f"invalid attribute name {word!r} at byte {offset}",
                offset=offset,
                expected=("NAME",),
            )
        i = m.end()
    tokens.append(("end", "", len(text.encode("utf-8"))))
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str, int]]):
        self.tokens = tokens
        self.pos = 0

    @property
    def current(self) -> tuple[str, str, int]:
        return self.tokens[self.pos]

    def advance(self) -> tuple[str, str, int]:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def fail(self, expected: tuple[str, ...]):
        kind, value, offset = self.current
        shown = value if kind != "end" else "end of input"
        raise ParseError(
            f"unexpected {shown!r} at byte {offset}", offset=offset, expected=expected
        )

    def expr(self) -> Policy:
        node = self.term()
        while self.current[0] == "or":
            self.advance()
            node = Or(node, self.term())
        return node

    def term(self) -> Policy:
        node = self.factor()
        while self.current[0] == "and":
            self.advance()
            node = And(node, self.factor())
        return node

    def factor(self) -> Policy:
        kind, value, _ = self.current
        if kind == "name":
            self.advance()
            return Attr(value)
        if kind == "lparen":
            self.advance()
            node = self.expr()
            if self.current[0] != "rparen":
                self.fail((")",))
            self.advance()
            return node
        self.fail(("NAME", "("))
        raise AssertionError("unreachable")


def parse_policy(text: str) -> Policy:
    parser = _Parser(_tokenize(text))
    policy = parser.expr()
    if parser.current[0] != "end":
        parser.fail(("AND", "OR", "END"))
    if policy_depth(policy) > MAX_POLICY_DEPTH:
        raise ParseError(
            f"policy tree deeper than {MAX_POLICY_DEPTH}", offset=0, expected=()
        )
    return policy


# --- tree surgery used by consent flows ---

def conjunction(names: Iterable[str]) -> Policy:
    """Left-associative AND chain over the sorted attribute names."""
    ordered = sorted(set(names))
    if not ordered:
        raise MalformedPolicy("conjunction over an empty attribute set")
    node: Policy = Attr(ordered[0])
    for name in ordered[1:]:
        node = And(node, Attr(name))
    validate_policy(node)
    return node


def prune_attributes(policy: Policy, names: set[str]) -> Policy | None:
    """Remove the named leaves; a node losing one child collapses to the other.

    Returns None when every leaf was removed.
    """
    if isinstance(policy, Attr):
        return None if policy.name in names else policy
    left = prune_attributes(policy.left, names)
    right = prune_attributes(policy.right, names)
    if left is None:
        return right
    if right is None:
        return left
    return type(policy)(left, right)


def remove_attributes(policy: Policy, names: set[str]) -> Policy:
    """Prune, but insist the names exist and something survives."""
    missing = names - leaf_names(policy)
    if missing:
        raise AttributeNotInPolicy(
            "not in policy: " + ", ".join(sorted(missing))
        )
    pruned = prune_attributes(policy, names)
    if pruned is None:
        raise MalformedPolicy("revocation would empty the policy")
    return pruned


def with_emergency_branch(policy: Policy) -> Policy:
    """OR the emergency override onto the policy (idempotent)."""
    if isinstance(policy, Or) and policy.right == Attr(EMERGENCY_OVERRIDE):
        return policy
    return Or(policy, Attr(EMERGENCY_OVERRIDE))


def strip_emergency_branch(policy: Policy) -> Policy:
    """Inverse of with_emergency_branch for canonically sealed policies."""
    if isinstance(policy, Or) and policy.right == Attr(EMERGENCY_OVERRIDE):
        return policy.left
    return policy
