"""Shared fixtures: a seeded in-memory deployment and the policy test suite."""

from __future__ import annotations

import pytest

from ehrvault.abe import AbeAuthority
from ehrvault.policy import EMERGENCY_OVERRIDE

UNIVERSE = {"a", "b", "c", "d", EMERGENCY_OVERRIDE}

# Twelve policies over {a, b, c, d}; paired with hand-coded evaluators they
# form the independent truth-table oracle used across the suite.
POLICY_SUITE: list[tuple[str, object]] = [
    ("a", lambda s: "a" in s),
    ("d", lambda s: "d" in s),
    ("a AND b", lambda s: "a" in s and "b" in s),
    ("a OR b", lambda s: "a" in s or "b" in s),
    ("(a AND b) OR d", lambda s: ("a" in s and "b" in s) or "d" in s),
    ("a AND b AND c", lambda s: "a" in s and "b" in s and "c" in s),
    ("a OR b OR c", lambda s: "a" in s or "b" in s or "c" in s),
    ("(a OR b) AND (c OR d)", lambda s: ("a" in s or "b" in s) and ("c" in s or "d" in s)),
    ("(a AND b) OR (c AND d)", lambda s: ("a" in s and "b" in s) or ("c" in s and "d" in s)),
    ("a AND (b OR (c AND d))", lambda s: "a" in s and ("b" in s or ("c" in s and "d" in s))),
    ("((a OR b) AND c) OR d", lambda s: (("a" in s or "b" in s) and "c" in s) or "d" in s),
    ("(a OR (b AND c)) AND d", lambda s: ("a" in s or ("b" in s and "c" in s)) and "d" in s),
]


def all_subsets(items: set[str]) -> list[frozenset[str]]:
    items = sorted(items)
    return [
        frozenset(x for bit, x in zip(range(len(items)), items) if mask >> bit & 1)
        for mask in range(1 << len(items))
    ]


@pytest.fixture
def authority() -> AbeAuthority:
    return AbeAuthority.setup(b"\x11" * 32, UNIVERSE)


@pytest.fixture
def seeded_deployment(tmp_path):
    from ehrvault.deployment import Deployment

    return Deployment.provision(tmp_path / "home", seed=b"\x42" * 32)
