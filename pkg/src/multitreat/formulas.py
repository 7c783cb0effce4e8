"""Formula mini-language for covariate generators and linear predictors.

Grammar (EBNF):

    expr      = term , { ("+" | "-") , term } ;
    term      = factor , { "*" , factor } ;
    factor    = NUMBER | VARIABLE | "-" , factor | "(" , expr , ")" | call ;
    call      = NAME , "(" , const , { "," , const } , [ "," , "by" , "=" , const ] , ")" ;
    const     = constant arithmetic expr (no variables, no calls) ;
    VARIABLE  = "x" , DIGITS ;
    NUMBER    = DIGITS , [ "." , DIGITS ] | "." , DIGITS , with optional exponent ;
    NAME      = "rnorm" | "rbeta" | "runif" | "rweibull" | "rbinom" | "seq" ;

"*" binds tighter than "+"/"-"; all binary operators are left-associative.
Distribution calls accept an optional leading sample-size argument, which is
parsed and ignored in favor of the caller-supplied n.  ``seq(from, to,
by = step)`` denotes an inclusive arithmetic grid.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .validation import ValidationError

DIST_NAMES = ("rnorm", "rbeta", "runif", "rweibull", "rbinom")


class ParseError(ValidationError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 1-based: x3 -> 3


@dataclass(frozen=True)
class Neg:
    operand: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class DistCall:
    name: str
    args: tuple[float, ...]


@dataclass(frozen=True)
class SeqCall:
    start: float
    stop: float
    step: float


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9.]*)"
    r"|(?P<op>[-+*(),=]))")


def _tokenize(text):
    tokens, pos = [], 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            off = len(text) - len(stripped)
            raise ParseError(f"unexpected character {stripped[0]!r}", off)
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name"), m.start("name")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, off = self.peek()
        if val != value:
            shown = val if val else "end of input"
            raise ParseError(f"expected {value!r}, found {shown!r}", off)
        return self.advance()

    def parse(self):
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected trailing input {val!r}", off)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.advance()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] == "*":
            self.advance()
            node = BinOp("*", node, self.factor())
        return node

    def factor(self):
        kind, val, off = self.peek()
        if val == "-":
            self.advance()
            return Neg(self.factor())
        if val == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if kind == "num":
            self.advance()
            return Num(float(val))
        if kind == "name":
            self.advance()
            if self.peek()[1] == "(":
                return self.call(val, off)
            m = re.fullmatch(r"x(\d+)", val)
            if m:
                idx = int(m.group(1))
                if idx < 1:
                    raise ParseError(f"covariate index must be >= 1 in {val!r}", off)
                return Var(idx)
            raise ParseError(f"unknown name {val!r}", off)
        shown = val if val else "end of input"
        raise ParseError(f"expected a number, covariate, or call, found {shown!r}", off)

    def call(self, name, off):
        if name != "seq" and name not in DIST_NAMES:
            raise ParseError(f"unknown function {name!r}", off)
        self.expect("(")
        args, by = [], None
        while True:
            kind, val, voff = self.peek()
            if kind == "name" and val == "by":
                self.advance()
                self.expect("=")
                by = (self.const_arg(), voff)
            else:
                args.append(self.const_arg())
            if self.peek()[1] == ",":
                self.advance()
                continue
            break
        self.expect(")")
        if name == "seq":
            if by is None:
                if len(args) != 3:
                    raise ParseError("seq needs (from, to, by = step)", off)
                start, stop, step = args
            else:
                if len(args) != 2:
                    raise ParseError("seq needs (from, to, by = step)", off)
                (start, stop), step = args, by[0]
            return SeqCall(start, stop, step)
        if by is not None:
            raise ParseError(f"{name} does not take a by= argument", by[1])
        return DistCall(name, tuple(args))

    def const_arg(self):
        kind, val, off = self.peek()
        node = self.expr()
        try:
            return _fold_const(node)
        except ValueError:
            raise ParseError("call arguments must be constant", off) from None


def _fold_const(node):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Neg):
        return -_fold_const(node.operand)
    if isinstance(node, BinOp):
        a, b = _fold_const(node.left), _fold_const(node.right)
        return a + b if node.op == "+" else a - b if node.op == "-" else a * b
    raise ValueError("not constant")


def parse_expr(text: str):
    """Parse a formula string into an AST; errors carry byte offsets."""
    return _Parser(text).parse()


_PREC = {"+": 1, "-": 1, "*": 2}


def print_expr(node) -> str:
    """Render an AST with minimal parentheses; parse(print(ast)) == ast."""
    return _print(node, 0)


def _print(node, parent_prec):
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Var):
        return f"x{node.index}"
    if isinstance(node, Neg):
        s = "-" + _print(node.operand, 3)
        return f"({s})" if parent_prec > 2 else s
    if isinstance(node, BinOp):
        prec = _PREC[node.op]
        left = _print(node.left, prec)
        # right side of - and of equal-precedence ops needs grouping
        right = _print(node.right, prec + 1)
        s = f"{left} {node.op} {right}"
        return f"({s})" if prec < parent_prec else s
    if isinstance(node, DistCall):
        return f"{node.name}({', '.join(_fmt_num(a) for a in node.args)})"
    if isinstance(node, SeqCall):
        return (f"seq({_fmt_num(node.start)}, {_fmt_num(node.stop)}, "
                f"by = {_fmt_num(node.step)})")
    raise TypeError(f"not an AST node: {node!r}")


def _fmt_num(v):
    return repr(float(v))


def _as_ast(expr):
    return parse_expr(expr) if isinstance(expr, str) else expr


def _contains_call(node):
    if isinstance(node, (DistCall, SeqCall)):
        return True
    if isinstance(node, Neg):
        return _contains_call(node.operand)
    if isinstance(node, BinOp):
        return _contains_call(node.left) or _contains_call(node.right)
    return False


def eval_formula(expr, x) -> np.ndarray:
    """Evaluate an arithmetic formula columnwise over a covariate matrix.

    ``x`` has covariate ``x<k>`` in column ``k-1``.  Returns a length-n vector.
    Formulas containing distribution calls or seq() cannot be evaluated.
    """
    node = _as_ast(expr)
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValidationError("x must be 2-d (n, p)")
    if _contains_call(node):
        raise ValidationError("formula contains a distribution or seq() call; "
                              "only arithmetic in covariates can be evaluated")
    return _eval(node, x) * np.ones(x.shape[0])


def _eval(node, x):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        if node.index > x.shape[1]:
            raise ValidationError(
                f"formula references x{node.index} but data has {x.shape[1]} covariates")
        return x[:, node.index - 1]
    if isinstance(node, Neg):
        return -_eval(node.operand, x)
    if isinstance(node, BinOp):
        a, b = _eval(node.left, x), _eval(node.right, x)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        return a * b
    raise ValidationError(f"cannot evaluate node {node!r}")


def _dist_params(name, args):
    spec = {
        "rnorm": ("mean", "sd"),
        "rbeta": ("shape1", "shape2"),
        "runif": ("low", "high"),
        "rweibull": ("shape", "scale"),
        "rbinom": ("size", "prob"),
    }[name]
    k = len(spec)
    if len(args) == k + 1:
        args = args[1:]  # leading sample-size argument, ignored
    if len(args) != k:
        raise ValidationError(
            f"{name} takes {k} parameters ({', '.join(spec)}) plus an optional "
            f"leading sample size, got {len(args)} argument(s)")
    return dict(zip(spec, args))


def sample_dist(expr, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n values from a distribution call such as ``rnorm(300, 0, 0.5)``."""
    node = _as_ast(expr)
    if isinstance(node, SeqCall):
        raise ValidationError("seq() denotes a grid, not a distribution")
    if not isinstance(node, DistCall):
        raise ValidationError("expected a distribution call like rnorm(0, 1)")
    if node.name not in DIST_NAMES:
        raise ValidationError(f"unknown distribution {node.name!r}")
    p = _dist_params(node.name, node.args)
    if node.name == "rnorm":
        if p["sd"] <= 0:
            raise ValidationError(f"rnorm sd must be > 0, got {p['sd']}")
        return rng.normal(p["mean"], p["sd"], n)
    if node.name == "rbeta":
        if p["shape1"] <= 0 or p["shape2"] <= 0:
            raise ValidationError("rbeta shapes must be > 0")
        return rng.beta(p["shape1"], p["shape2"], n)
    if node.name == "runif":
        if p["high"] < p["low"]:
            raise ValidationError(f"runif needs low <= high, got ({p['low']}, {p['high']})")
        return rng.uniform(p["low"], p["high"], n)
    if node.name == "rweibull":
        if p["shape"] <= 0 or p["scale"] <= 0:
            raise ValidationError("rweibull shape and scale must be > 0")
        return p["scale"] * rng.weibull(p["shape"], n)
    size = p["size"]
    if size < 0 or size != int(size):
        raise ValidationError(f"rbinom size must be a nonnegative integer, got {size}")
    if not 0 <= p["prob"] <= 1:
        raise ValidationError(f"rbinom prob must be in [0, 1], got {p['prob']}")
    return rng.binomial(int(size), p["prob"], n).astype(float)


def expand_grid(expr) -> np.ndarray:
    """Expand ``seq(from, to, by = step)`` into its inclusive grid."""
    node = _as_ast(expr)
    if not isinstance(node, SeqCall):
        raise ValidationError("expected seq(from, to, by = step)")
    start, stop, step = node.start, node.stop, node.step
    if step == 0:
        raise ValidationError("seq step must be nonzero")
    span = stop - start
    if span != 0 and np.sign(span) != np.sign(step):
        raise ValidationError(
            f"seq step {step} moves away from the endpoint ({start} to {stop})")
    count = int(np.floor(span / step + 1e-9)) + 1
    return start + step * np.arange(count)


def is_dist_call(expr) -> bool:
    return isinstance(_as_ast(expr), DistCall)


def is_seq_call(expr) -> bool:
    return isinstance(_as_ast(expr), SeqCall)
