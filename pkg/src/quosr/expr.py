"""Expression trees: parsing, canonical text, evaluation, generation.

Expressions are immutable trees of :class:`Const`, :class:`Var`,
:class:`Unary`, :class:`Binary` and (in skeletons) :class:`Placeholder`
nodes. They play the part of the hidden physical systems being queried
and of the hypotheses tried by the regressor.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

UNARY_OPS = ("sin", "cos", "exp", "log", "sqrt", "neg")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")
FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt")

_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}
_BY_SYMBOL = {v: k for k, v in _SYMBOL.items()}

# precedence used when printing
_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "neg": 3, "pow": 4}
_ATOM = 5


class ExprError(ValueError):
    pass


class ParseError(ExprError):
    """Malformed expression text; ``pos`` is the character offset."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} at offset {pos}")
        self.pos = pos


class ArityError(ExprError):
    pass


class DomainError(ArithmeticError):
    """Evaluation left the real domain; ``node`` is the offending subtree."""

    def __init__(self, node: "Expr", message: str = "domain failure"):
        super().__init__(f"{message} in {to_text(node)}")
        self.node = node


@dataclass(frozen=True)
class Const:
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True)
class Var:
    index: int = 0


@dataclass(frozen=True)
class Placeholder:
    """Constant slot of a skeleton, printed as ``<C>``."""


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Expr"

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ExprError(f"unknown unary op {self.op!r}")


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ExprError(f"unknown binary op {self.op!r}")


Expr = Union[Const, Var, Placeholder, Unary, Binary]


def children(e: Expr) -> tuple:
    if isinstance(e, Unary):
        return (e.child,)
    if isinstance(e, Binary):
        return (e.left, e.right)
    return ()


def walk(e: Expr) -> Iterator[Expr]:
    """Pre-order traversal."""
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def depth(e: Expr) -> int:
    """Depth counting a lone leaf as 1."""
    kids = children(e)
    return 1 + max((depth(c) for c in kids), default=0)


def size(e: Expr) -> int:
    return sum(1 for _ in walk(e))


def max_var_index(e: Expr) -> int:
    return max((n.index for n in walk(e) if isinstance(n, Var)), default=-1)


def has_var(e: Expr) -> bool:
    return any(isinstance(n, Var) for n in walk(e))


def constants(e: Expr) -> list[float]:
    return [n.value for n in walk(e) if isinstance(n, Const)]


# ---------------------------------------------------------------------------
# canonical text


def format_number(v: float) -> str:
    """Shortest round-trip text; integral values drop the trailing ``.0``."""
    s = repr(float(v))
    if s.endswith(".0"):
        s = s[:-2]
    return s


def _prec(e: Expr) -> int:
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Unary) and e.op == "neg":
        return _PREC["neg"]
    if isinstance(e, Const) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return _PREC["neg"]
    return _ATOM


def to_text(e: Expr, arity: int | None = None) -> str:
    """Canonical text with minimal parentheses.

    ``Var(0)`` prints as ``x`` when the expression only uses one variable
    (or ``arity == 1``), otherwise variables print as ``x0, x1, ...``.
    """
    if arity is None:
        arity = max_var_index(e) + 1
    short = arity <= 1
    return _fmt(e, short)


def _fmt(e: Expr, short: bool) -> str:
    if isinstance(e, Const):
        return format_number(e.value)
    if isinstance(e, Var):
        return "x" if short and e.index == 0 else f"x{e.index}"
    if isinstance(e, Placeholder):
        return "<C>"
    if isinstance(e, Unary):
        if e.op == "neg":
            inner = _fmt(e.child, short)
            # a bare literal after '-' would be read back as a negative Const
            if _prec(e.child) < _PREC["neg"] or isinstance(e.child, (Const, Placeholder)):
                inner = f"({inner})"
            return "-" + inner
        return f"{e.op}({_fmt(e.child, short)})"
    p = _PREC[e.op]
    left, right = _fmt(e.left, short), _fmt(e.right, short)
    if e.op == "pow":
        if _prec(e.left) <= p:
            left = f"({left})"
        if _prec(e.right) < _PREC["neg"]:
            right = f"({right})"
    else:
        if _prec(e.left) < p:
            left = f"({left})"
        if _prec(e.right) <= p:
            right = f"({right})"
    return f"{left}{_SYMBOL[e.op]}{right}"


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|inf|nan)"
    r"|(?P<ph><C>)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def tokenize(text: str) -> list[tuple[str, str, int]]:
    """Split into (kind, text, offset) tokens; kind in num/ph/name/op/end."""
    out = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str, arity: int | None):
        self.text = text
        self.toks = tokenize(text)
        self.i = 0
        self.arity = arity

    @property
    def tok(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect_op(self, sym: str):
        kind, val, pos = self.tok
        if kind != "op" or val != sym:
            got = "end of input" if kind == "end" else repr(val)
            raise ParseError(f"expected {sym!r}, got {got}", pos)
        self.i += 1

    def parse(self) -> Expr:
        e = self.expr()
        kind, val, pos = self.tok
        if kind != "end":
            raise ParseError(f"unexpected {val!r}", pos)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.tok[0] == "op" and self.tok[1] in "+-":
            op = _BY_SYMBOL[self.take()[1]]
            e = Binary(op, e, self.term())
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.tok[0] == "op" and self.tok[1] in "*/":
            op = _BY_SYMBOL[self.take()[1]]
            e = Binary(op, e, self.unary())
        return e

    def unary(self) -> Expr:
        if self.tok[0] == "op" and self.tok[1] == "-":
            self.take()
            folds = self.tok[0] == "num"
            operand = self.unary()
            if folds and isinstance(operand, Const):
                return Const(-operand.value)
            return Unary("neg", operand)
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.tok[0] == "op" and self.tok[1] == "^":
            self.take()
            return Binary("pow", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, val, pos = self.take()
        if kind == "num":
            return Const(float(val))
        if kind == "ph":
            return Placeholder()
        if kind == "name":
            if val in FUNCTIONS:
                self.expect_op("(")
                inner = self.expr()
                self.expect_op(")")
                return Unary(val, inner)
            return Var(self._var_index(val, pos))
        if kind == "op" and val == "(":
            inner = self.expr()
            self.expect_op(")")
            return inner
        if kind == "end":
            raise ParseError("unexpected end of input", pos)
        raise ParseError(f"unexpected {val!r}", pos)

    def _var_index(self, name: str, pos: int) -> int:
        if name == "x":
            idx = 0
        else:
            m = re.fullmatch(r"x(\d+)", name)
            if m is None:
                raise ParseError(f"unknown identifier {name!r}", pos)
            idx = int(m.group(1))
        if self.arity is not None and idx >= self.arity:
            raise ArityError(f"variable {name!r} out of range for arity {self.arity}")
        return idx


def parse(text: str, arity: int | None = None) -> Expr:
    """Parse expression text.

    >>> parse("cos(x+1)")
    Unary(op='cos', child=Binary(op='add', left=Var(index=0), right=Const(value=1.0)))
    """
    return _Parser(text, arity).parse()


# ---------------------------------------------------------------------------
# scalar evaluation


def _pow(a: float, b: float) -> float:
    if a < 0 and b != math.floor(b):
        raise ValueError("negative base with fractional exponent")
    if a == 0 and b < 0:
        raise ValueError("zero to a negative power")
    return math.pow(a, b)


def evaluate(f: Expr, x: Sequence[float]) -> float:
    """Evaluate at a single point; raises :class:`DomainError` off-domain."""
    x = [float(v) for v in np.atleast_1d(x)]
    return _eval(f, x)


def _eval(e: Expr, x: list) -> float:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        if e.index >= len(x):
            raise ArityError(f"x{e.index} not supplied (got {len(x)} inputs)")
        return x[e.index]
    if isinstance(e, Placeholder):
        raise ExprError("cannot evaluate a skeleton placeholder")
    try:
        if isinstance(e, Unary):
            a = _eval(e.child, x)
            op = e.op
            if op == "neg":
                r = -a
            elif op == "sin":
                r = math.sin(a)
            elif op == "cos":
                r = math.cos(a)
            elif op == "exp":
                r = math.exp(a) if a < 710 else math.inf
            elif op == "log":
                if a <= 0:
                    raise ValueError("log of non-positive")
                r = math.log(a)
            else:
                if a < 0:
                    raise ValueError("sqrt of negative")
                r = math.sqrt(a)
        else:
            a = _eval(e.left, x)
            b = _eval(e.right, x)
            op = e.op
            if op == "add":
                r = a + b
            elif op == "sub":
                r = a - b
            elif op == "mul":
                r = a * b
            elif op == "div":
                if b == 0:
                    raise ValueError("division by zero")
                r = a / b
            else:
                r = _pow(a, b)
    except (ValueError, OverflowError) as exc:
        raise DomainError(e, str(exc)) from None
    if not math.isfinite(r):
        raise DomainError(e, "non-finite result")
    return r


# ---------------------------------------------------------------------------
# skeletons


def skeletonize(f: Expr) -> Expr:
    """Replace every constant (exponents included) by a placeholder."""
    if isinstance(f, Const):
        return Placeholder()
    if isinstance(f, Unary):
        return Unary(f.op, skeletonize(f.child))
    if isinstance(f, Binary):
        return Binary(f.op, skeletonize(f.left), skeletonize(f.right))
    return f


def count_placeholders(s: Expr) -> int:
    return sum(1 for n in walk(s) if isinstance(n, (Placeholder, Const)))


def fill(template: Expr, values: Sequence[float]) -> Expr:
    """Substitute ``values`` (pre-order) into the constant slots of ``template``.

    Both placeholders and concrete constants count as slots, so ``fill`` can
    also re-parameterize an ordinary expression.
    """
    it = iter(values)

    def go(e):
        if isinstance(e, (Placeholder, Const)):
            return Const(next(it))
        if isinstance(e, Unary):
            return Unary(e.op, go(e.child))
        if isinstance(e, Binary):
            return Binary(e.op, go(e.left), go(e.right))
        return e

    out = go(template)
    if next(it, None) is not None:
        raise ValueError("too many values for template")
    return out


def exponent_slots(template: Expr) -> list[bool]:
    """For each constant slot (pre-order): is it directly a pow exponent?"""
    flags = []

    def go(e, is_exp):
        if isinstance(e, (Placeholder, Const)):
            flags.append(is_exp)
        elif isinstance(e, Unary):
            go(e.child, False)
        elif isinstance(e, Binary):
            go(e.left, False)
            go(e.right, e.op == "pow")

    go(template, False)
    return flags


# ---------------------------------------------------------------------------
# compiled (postfix) programs for the vectorized kernels

OPCODES = {
    "const": 0, "var": 1,
    "neg": 2, "sin": 3, "cos": 4, "exp": 5, "log": 6, "sqrt": 7,
    "add": 8, "sub": 9, "mul": 10, "div": 11, "pow": 12,
}


@dataclass(frozen=True)
class Program:
    """Postfix form of an expression; constant slots live in ``consts``."""

    ops: np.ndarray
    args: np.ndarray
    consts: np.ndarray
    arity: int
    template: Expr = field(compare=False, repr=False)

    def with_consts(self, values) -> "Program":
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.shape != self.consts.shape:
            raise ValueError("constant count mismatch")
        return Program(self.ops, self.args, values, self.arity, self.template)

    def to_expr(self) -> Expr:
        return fill(self.template, self.consts) if len(self.consts) else self.template


def compile_expr(e: Expr, arity: int | None = None) -> Program:
    """Compile to postfix; placeholders get value 0 unless filled later."""
    ops, args, consts = [], [], []

    def go(n):
        if isinstance(n, (Const, Placeholder)):
            ops.append(OPCODES["const"])
            args.append(len(consts))
            consts.append(n.value if isinstance(n, Const) else 0.0)
        elif isinstance(n, Var):
            ops.append(OPCODES["var"])
            args.append(n.index)
        elif isinstance(n, Unary):
            go(n.child)
            ops.append(OPCODES[n.op])
            args.append(0)
        else:
            go(n.left)
            go(n.right)
            ops.append(OPCODES[n.op])
            args.append(0)

    go(e)
    if arity is None:
        arity = max(1, max_var_index(e) + 1)
    return Program(
        np.asarray(ops, dtype=np.int32),
        np.asarray(args, dtype=np.int32),
        np.asarray(consts, dtype=np.float64),
        arity,
        e,
    )


# ---------------------------------------------------------------------------
# random generation


@dataclass(frozen=True)
class GeneratorConfig:
    max_depth: int = 6
    arity: int = 1
    unary_ops: tuple = ("sin", "cos", "exp", "log", "sqrt", "neg")
    binary_ops: tuple = ("add", "sub", "mul", "div", "pow")
    const_range: tuple = (-3.0, 3.0)
    const_decimals: int = 2
    exponent_range: tuple = (2, 4)
    leaf_prob: float = 0.3
    var_prob: float = 0.65
    # validity probe over the query box
    domain: tuple = (-3.0, 3.0)
    probe_points: int = 64
    min_defined_fraction: float = 0.5
    reject_constant: bool = True
    max_retries: int = 200

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        for op in self.unary_ops:
            if op not in UNARY_OPS:
                raise ValueError(f"unknown unary op {op!r}")
        for op in self.binary_ops:
            if op not in BINARY_OPS:
                raise ValueError(f"unknown binary op {op!r}")


def _grow(rng: np.random.Generator, cfg: GeneratorConfig, d: int) -> Expr:
    can_branch = d < cfg.max_depth and (cfg.unary_ops or cfg.binary_ops)
    # leaf probability grows with depth; root is never a leaf unless forced
    p_leaf = 0.0 if d == 1 else cfg.leaf_prob + (1 - cfg.leaf_prob) * (d - 1) / cfg.max_depth
    if not can_branch or rng.random() < p_leaf:
        if rng.random() < cfg.var_prob:
            return Var(int(rng.integers(cfg.arity)))
        lo, hi = cfg.const_range
        return Const(round(float(rng.uniform(lo, hi)), cfg.const_decimals))
    n_un, n_bin = len(cfg.unary_ops), len(cfg.binary_ops)
    k = int(rng.integers(n_un + n_bin))
    if k < n_un:
        return Unary(cfg.unary_ops[k], _grow(rng, cfg, d + 1))
    op = cfg.binary_ops[k - n_un]
    if op == "pow":
        lo, hi = cfg.exponent_range
        return Binary("pow", _grow(rng, cfg, d + 1), Const(int(rng.integers(lo, hi + 1))))
    return Binary(op, _grow(rng, cfg, d + 1), _grow(rng, cfg, d + 1))


def _acceptable(e: Expr, cfg: GeneratorConfig) -> bool:
    if not has_var(e) or depth(e) > cfg.max_depth:
        return False
    if cfg.min_defined_fraction <= 0 and not cfg.reject_constant:
        return True
    from . import kernels

    lo, hi = cfg.domain
    grid = np.linspace(lo, hi, cfg.probe_points)
    X = np.tile(grid[:, None], (1, cfg.arity))
    y, ok = kernels.eval_program(compile_expr(e, cfg.arity), X)
    if ok.mean() < cfg.min_defined_fraction:
        return False
    if cfg.reject_constant and np.ptp(y[ok]) < 1e-9:
        return False
    return True


def random_expr(seed: int, arity: int = 1, config: GeneratorConfig | None = None) -> Expr:
    """Deterministic random expression for ``seed``.

    Falls back to ``x`` after ``max_retries`` rejected draws.
    """
    cfg = config or GeneratorConfig()
    if cfg.arity != arity:
        cfg = GeneratorConfig(**{**cfg.__dict__, "arity": arity})
    rng = np.random.default_rng([seed, 0x5EED])
    for _ in range(cfg.max_retries):
        e = _grow(rng, cfg, 1)
        if _acceptable(e, cfg):
            return e
    return Var(0)


def generate_family(seed: int, count: int, arity: int = 1,
                    config: GeneratorConfig | None = None) -> list[Expr]:
    """``count`` expressions; member ``i`` depends only on ``(seed, i)``."""
    out = []
    for i in range(count):
        sub = int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0] >> 1)
        out.append(random_expr(sub, arity, config))
    return out


# ---------------------------------------------------------------------------
# family files


FAMILY_HEADER = "# quosr-expressions v1"


def write_family(path, exprs: Sequence[Expr]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(FAMILY_HEADER + "\n")
        for e in exprs:
            fh.write(to_text(e) + "\n")


def read_family(path, arity: int | None = None) -> list[Expr]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].startswith("# quosr-expressions"):
        raise ValueError(f"{path}: missing expression-family header")
    if lines[0].strip() != FAMILY_HEADER:
        raise ValueError(f"{path}: unsupported version {lines[0].strip()!r}")
    return [parse(line, arity) for line in lines[1:] if line.strip()]
