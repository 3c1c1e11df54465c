"""Policy grammar, printing, evaluation, and tree surgery."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, strategies as st

from ehrvault.errors import AttributeNotInPolicy, MalformedPolicy, ParseError
from ehrvault.policy import (
    And,
    Attr,
    EMERGENCY_OVERRIDE,
    MAX_POLICY_DEPTH,
    Or,
    conjunction,
    leaf_names,
    parse_policy,
    policy_depth,
    policy_to_string,
    prune_attributes,
    remove_attributes,
    satisfies,
    strip_emergency_branch,
    validate_policy,
    with_emergency_branch,
)

from conftest import POLICY_SUITE, all_subsets


class TestParsing:
    def test_paper_shape(self):
        assert parse_policy("(a AND b) OR d") == Or(And(Attr("a"), Attr("b")), Attr("d"))

    def test_single_leaf(self):
        assert parse_policy("a") == Attr("a")

    def test_and_binds_tighter_than_or(self):
        assert parse_policy("a AND b OR c") == Or(And(Attr("a"), Attr("b")), Attr("c"))

    def test_left_associativity(self):
        assert parse_policy("a OR b OR c") == Or(Or(Attr("a"), Attr("b")), Attr("c"))
        assert parse_policy("a AND b AND c") == And(And(Attr("a"), Attr("b")), Attr("c"))

    def test_namespaced_attributes(self):
        assert parse_policy("dept:cardiology") == Attr("dept:cardiology")
        assert parse_policy("patient:2WxYz._-3") == Attr("patient:2WxYz._-3")

    def test_redundant_parens_collapse(self):
        assert parse_policy("(((a)))") == Attr("a")

    def test_empty_input(self):
        with pytest.raises(ParseError) as exc:
            parse_policy("")
        assert exc.value.offset == 0
        assert "NAME" in exc.value.expected

    def test_error_carries_byte_offset(self):
        with pytest.raises(ParseError) as exc:
            parse_policy("a AND ")
        assert exc.value.offset == 6
        assert set(exc.value.expected) == {"NAME", "("}

    def test_unbalanced_paren(self):
        with pytest.raises(ParseError) as exc:
            parse_policy("(a AND b")
        assert ")" in exc.value.expected

    def test_trailing_tokens(self):
        with pytest.raises(ParseError) as exc:
            parse_policy("a b")
        assert exc.value.offset == 2

    def test_invalid_attribute_name(self):
        with pytest.raises(ParseError):
            parse_policy("Apple")  # must start lowercase
        with pytest.raises(ParseError):
            parse_policy("a:b:c")  # a single namespace colon only

    def test_unexpected_character(self):
        with pytest.raises(ParseError) as exc:
            parse_policy("a & b")
        assert exc.value.offset == 2

    def test_depth_limit(self):
        wide = " AND ".join(f"x{i}" for i in range(MAX_POLICY_DEPTH + 2))
        with pytest.raises(ParseError):
            parse_policy(wide)


class TestPrinting:
    def test_canonical_form(self):
        tree = Or(And(Attr("a"), Attr("b")), Attr("d"))
        assert policy_to_string(tree) == "((a AND b) OR d)"

    def test_leaf(self):
        assert policy_to_string(Attr("a")) == "a"

    def test_round_trip_1000_random_trees(self):
        rnd = random.Random(7)
        names = ["a", "b", "c", "dept:x", "role:y", "site:z_1"]

        def build(depth: int):
            if depth <= 1 or rnd.random() < 0.3:
                return Attr(rnd.choice(names))
            cls = And if rnd.random() < 0.5 else Or
            return cls(build(depth - 1), build(depth - 1))

        for _ in range(1000):
            tree = build(rnd.randint(1, 8))
            assert parse_policy(policy_to_string(tree)) == tree


_names = st.sampled_from(["a", "b", "c", "d", "dept:x", "role:nurse"])
_trees = st.recursive(
    _names.map(Attr),
    lambda kids: st.tuples(st.sampled_from([And, Or]), kids, kids).map(
        lambda t: t[0](t[1], t[2])
    ),
    max_leaves=24,
)


@given(_trees)
def test_round_trip_property(tree):
    assert parse_policy(policy_to_string(tree)) == tree


class TestSatisfies:
    @pytest.mark.parametrize(
        "attrs,expected",
        [({"d"}, True), ({"a", "b"}, True), ({"a"}, False), ({"b"}, False), (set(), False)],
    )
    def test_paper_example(self, attrs, expected):
        assert satisfies(parse_policy("(a AND b) OR d"), attrs) is expected

    def test_oracle_agreement_full_table(self):
        # satisfies() against the independent hand-coded evaluators.
        for text, oracle in POLICY_SUITE:
            policy = parse_policy(text)
            for subset in all_subsets({"a", "b", "c", "d"}):
                assert satisfies(policy, subset) == oracle(subset), (text, sorted(subset))

    def test_against_independent_parser_oracle(self):
        # A second, structurally different parser: shunting-yard to RPN,
        # evaluated directly. 50 random formulas, all assignments.
        def rpn(text: str) -> list[str]:
            tokens = text.replace("(", " ( ").replace(")", " ) ").split()
            out, ops = [], []
            prec = {"AND": 2, "OR": 1}
            for tok in tokens:
                if tok in prec:
                    while ops and ops[-1] in prec and prec[ops[-1]] >= prec[tok]:
                        out.append(ops.pop())
                    ops.append(tok)
                elif tok == "(":
                    ops.append(tok)
                elif tok == ")":
                    while ops[-1] != "(":
                        out.append(ops.pop())
                    ops.pop()
                else:
                    out.append(tok)
            while ops:
                out.append(ops.pop())
            return out

        def eval_rpn(program: list[str], held: frozenset) -> bool:
            stack = []
            for tok in program:
                if tok == "AND":
                    b, a = stack.pop(), stack.pop()
                    stack.append(a and b)
                elif tok == "OR":
                    b, a = stack.pop(), stack.pop()
                    stack.append(a or b)
                else:
                    stack.append(tok in held)
            return stack[0]

        rnd = random.Random(13)
        variables = ["a", "b", "c", "d"]

        def formula(depth: int) -> str:
            if depth == 0 or rnd.random() < 0.35:
                return rnd.choice(variables)
            op = rnd.choice([" AND ", " OR "])
            left, right = formula(depth - 1), formula(depth - 1)
            return f"({left}{op}{right})" if rnd.random() < 0.5 else f"{left}{op}{right}"

        for _ in range(50):
            text = formula(4)
            program = rpn(text)
            policy = parse_policy(text)
            for subset in all_subsets(set(variables)):
                assert satisfies(policy, subset) == eval_rpn(program, subset), text


class TestSurgery:
    def test_validate_rejects_bad_leaf(self):
        with pytest.raises(MalformedPolicy):
            validate_policy(Attr("NotValid"))

    def test_validate_rejects_foreign_node(self):
        with pytest.raises(MalformedPolicy):
            validate_policy(And(Attr("a"), "not a node"))  # type: ignore[arg-type]

    def test_depth_and_leaves(self):
        tree = parse_policy("(a AND b) OR d")
        assert policy_depth(tree) == 3
        assert leaf_names(tree) == {"a", "b", "d"}

    def test_conjunction_sorted_left_assoc(self):
        tree = conjunction({"role:doc", "dept:x"})
        assert policy_to_string(tree) == "(dept:x AND role:doc)"
        with pytest.raises(MalformedPolicy):
            conjunction(set())

    def test_prune_collapses_nodes(self):
        tree = parse_policy("(a AND b) OR d")
        assert prune_attributes(tree, {"d"}) == And(Attr("a"), Attr("b"))
        assert prune_attributes(tree, {"a"}) == Or(Attr("b"), Attr("d"))
        assert prune_attributes(tree, {"a", "b", "d"}) is None

    def test_remove_attributes_guards(self):
        tree = parse_policy("a OR b")
        assert remove_attributes(tree, {"b"}) == Attr("a")
        with pytest.raises(AttributeNotInPolicy):
            remove_attributes(tree, {"zzz"})
        with pytest.raises(MalformedPolicy):
            remove_attributes(tree, {"a", "b"})

    def test_emergency_branch_wrap_and_strip(self):
        base = parse_policy("a AND b")
        wrapped = with_emergency_branch(base)
        assert wrapped == Or(base, Attr(EMERGENCY_OVERRIDE))
        assert with_emergency_branch(wrapped) == wrapped  # idempotent
        assert strip_emergency_branch(wrapped) == base
        assert strip_emergency_branch(base) == base
