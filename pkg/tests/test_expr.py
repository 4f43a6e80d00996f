import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from quosr import kernels
from quosr.expr import (
    ArityError, Binary, Const, DomainError, GeneratorConfig, ParseError, Placeholder, Unary, Var,
    compile_expr, constants, count_placeholders, depth, evaluate, exponent_slots, fill,
    generate_family, parse, random_expr, read_family, size, skeletonize, to_text, write_family,
)


@pytest.mark.parametrize("text", [
    "2*x+1", "x^2^3", "(x^2)^3", "-x^2", "sin(x)/cos(x)", "x0*x1-3", "-(2)",
    "x-(x-1)", "<C>*sin(<C>*x)", "exp(-x)", "(x+1)*(x-1)", "x/(x/2)", "sqrt(log(x^2+1))",
])
def test_canonical_text_is_fixed_point(text):
    assert to_text(parse(text)) == text


def test_precedence_and_associativity():
    assert parse("1+2*3") == Binary("add", Const(1.0), Binary("mul", Const(2.0), Const(3.0)))
    assert parse("2^3^2") == Binary("pow", Const(2.0), Binary("pow", Const(3.0), Const(2.0)))
    assert parse("8-4-2") == Binary("sub", Binary("sub", Const(8.0), Const(4.0)), Const(2.0))
    assert evaluate(parse("2^3^2"), [0.0]) == 512.0
    assert evaluate(parse("-x^2"), [3.0]) == -9.0


def test_number_canonicalization():
    assert to_text(parse("2.50*x")) == "2.5*x"
    assert to_text(parse("1e-3*x")) == "0.001*x"


def test_single_variable_prints_as_x():
    assert to_text(parse("x0+1")) == "x+1"
    assert to_text(parse("x0*x1")) == "x0*x1"


@pytest.mark.parametrize("text,exc", [
    ("x+", ParseError), ("2**x", ParseError), ("foo(x)", ParseError), ("(x", ParseError),
    ("", ParseError), ("sin x", ParseError),
])
def test_parse_errors(text, exc):
    with pytest.raises(exc):
        parse(text, arity=2)


def test_parse_error_offset():
    with pytest.raises(ParseError) as info:
        parse("x + * 2")
    assert info.value.pos == 4


def test_arity_error():
    with pytest.raises(ArityError):
        parse("x3", arity=2)
    assert parse("x3") == Var(3)


@pytest.mark.parametrize("text,x", [
    ("log(x)", -1.0), ("log(x)", 0.0), ("sqrt(x)", -4.0), ("1/(x-x)", 1.0),
    ("x^0.5", -8.0), ("x^-1", 0.0), ("exp(exp(x))", 10.0),
])
def test_domain_failures_raise(text, x):
    with pytest.raises(DomainError) as info:
        evaluate(parse(text), [x])
    assert info.value.node is not None


def test_domain_error_names_failing_node():
    e = parse("x+log(x-2)")
    with pytest.raises(DomainError) as info:
        evaluate(e, [1.0])
    assert info.value.node == parse("log(x-2)")


def test_integer_power_of_negative_base():
    assert evaluate(parse("x^3"), [-2.0]) == -8.0
    assert evaluate(parse("x^0"), [0.0]) == 1.0


def test_tree_measures():
    e = parse("sin(x)+2*x")
    assert depth(Var(0)) == 1
    assert depth(e) == 3
    assert size(e) == 6
    assert constants(e) == [2.0]


def test_skeleton_and_fill():
    e = parse("2.5*sin(1.3*x)+x^2")
    sk = skeletonize(e)
    assert to_text(sk) == "<C>*sin(<C>*x)+x^<C>"
    assert count_placeholders(sk) == 3
    assert exponent_slots(sk) == [False, False, True]
    assert fill(sk, [2.5, 1.3, 2.0]) == e
    with pytest.raises(ValueError):
        fill(sk, [1.0, 2.0, 3.0, 4.0])


def test_program_round_trip():
    e = parse("2*x0-x1/3")
    prog = compile_expr(e, 2)
    assert prog.to_expr() == e
    assert prog.with_consts([4.0, 6.0]).to_expr() == parse("4*x0-x1/6")


def test_random_expr_deterministic():
    assert random_expr(17) == random_expr(17)
    assert generate_family(3, 20) == generate_family(3, 20)
    assert generate_family(3, 20)[:5] == generate_family(3, 5)


def test_generator_respects_limits():
    cfg = GeneratorConfig(max_depth=4)
    grid = np.linspace(-3, 3, 64)[:, None]
    for e in generate_family(0, 200, 1, cfg):
        assert depth(e) <= 4
        y, ok = kernels.eval_program(compile_expr(e, 1), grid)
        assert ok.mean() >= 0.5
        # pow exponents are integers
        for n, is_exp in zip([n for n in _consts(e)], exponent_slots(e)):
            if is_exp:
                assert float(n).is_integer()


def _consts(e):
    return constants(e)


def test_round_trip_ten_thousand_seeds():
    # parse(to_text(e)) reproduces the tree exactly for every generated expression
    for seed in range(10_000):
        e = random_expr(seed)
        assert parse(to_text(e)) == e, seed


@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False).filter(lambda v: v != 0))
def test_constant_text_round_trip(v):
    e = Binary("mul", Const(v), Var(0))
    assert parse(to_text(e)) == e


@given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
def test_scalar_evaluation_matches_kernels(seed, x):
    e = random_expr(seed, 1, GeneratorConfig(max_depth=4))
    y, ok = kernels.eval_program(compile_expr(e, 1), np.array([[x]]))
    try:
        v = evaluate(e, [x])
    except DomainError:
        assert not ok[0]
        return
    assert ok[0]
    assert math.isclose(v, y[0], rel_tol=1e-9, abs_tol=1e-12)


def test_family_file_round_trip(tmp_path):
    fam = generate_family(1, 30)
    path = tmp_path / "fam.txt"
    write_family(path, fam)
    assert read_family(path) == fam
    write_family(path, [])
    assert read_family(path) == []


def test_family_file_rejects_unknown_version(tmp_path):
    path = tmp_path / "fam.txt"
    path.write_text("# quosr-expressions v9\nx\n")
    with pytest.raises(ValueError, match="version"):
        read_family(path)
    path.write_text("x\n")
    with pytest.raises(ValueError):
        read_family(path)


def test_placeholder_parsing():
    assert parse("<C>") == Placeholder()
    assert parse("-<C>") == Unary("neg", Placeholder())
