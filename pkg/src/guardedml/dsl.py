"""Small expression language for per-column transforms.

Two-phase evaluation keeps fold isolation explicit: ``fit_expr`` freezes every
aggregate (mean, sd, quantiles, ...) on analysis rows only, and ``apply_expr``
substitutes the frozen values during rowwise evaluation.  A static auditor
rejects expressions with external-dependency or I/O-suggestive patterns before
anything is fitted.

Grammar::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := NUMBER | IDENT | IDENT '(' expr (',' expr)* ')' | '(' expr ')' | '-' factor

Identifiers match ``[A-Za-z_][A-Za-z0-9_.]*``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

from .tabular import ColumnKind, Dataset

ELEMENTWISE = ("log", "exp", "abs", "sqrt")
AGGREGATES = ("mean", "sd", "median", "min", "max", "q25", "q75")
BUILTINS = ELEMENTWISE + AGGREGATES

# I/O-suggestive identifier fragments; matching is substring-based and fails closed.
IO_TOKENS = ("read", "write", "load", "save", "open", "system",
             "download", "connect", "env", "fetch")

MAX_INLINE_LITERALS = 25


class ParseError(ValueError):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} at position {pos}")
        self.pos = pos


class EvalError(ValueError):
    """Expression cannot be fitted or applied to the given data."""


@dataclass(frozen=True)
class Span:
    start: int
    end: int


@dataclass(frozen=True)
class Num:
    value: float
    span: Span
    node_id: int = -1


@dataclass(frozen=True)
class Ident:
    name: str
    span: Span
    node_id: int = -1


@dataclass(frozen=True)
class Neg:
    operand: "Expr"
    span: Span
    node_id: int = -1


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"
    span: Span
    node_id: int = -1


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expr", ...]
    span: Span
    node_id: int = -1


Expr = Union[Num, Ident, Neg, BinOp, Call]

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_.]*)"
    r"|(?P<op>[-+*/(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            raise ParseError(f"unexpected character {stripped[0]!r}", len(text) - len(stripped))
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.group("ident") is not None:
            tokens.append(("ident", m.group("ident"), m.start("ident")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    """Recursive-descent parser; lenient mode keeps unknown functions for auditing."""

    def __init__(self, text: str, lenient: bool):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.lenient = lenient

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, val, pos = self.peek()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r}", pos)
        return self.advance()

    def parse(self) -> Expr:
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "eof":
            raise ParseError(f"unexpected token {val!r}", pos)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while True:
            kind, val, pos = self.peek()
            if kind == "op" and val in "+-":
                self.advance()
                right = self.term()
                node = BinOp(val, node, right, Span(node.span.start, right.span.end))
            else:
                return node

    def term(self) -> Expr:
        node = self.factor()
        while True:
            kind, val, pos = self.peek()
            if kind == "op" and val in "*/":
                self.advance()
                right = self.factor()
                node = BinOp(val, node, right, Span(node.span.start, right.span.end))
            else:
                return node

    def factor(self) -> Expr:
        kind, val, pos = self.peek()
        if kind == "num":
            self.advance()
            return Num(float(val), Span(pos, pos + len(val)))
        if kind == "op" and val == "-":
            self.advance()
            operand = self.factor()
            return Neg(operand, Span(pos, operand.span.end))
        if kind == "op" and val == "(":
            self.advance()
            node = self.expr()
            self.expect_op(")")
            return node
        if kind == "ident":
            self.advance()
            nxt_kind, nxt_val, _ = self.peek()
            if nxt_kind == "op" and nxt_val == "(":
                self.advance()
                args = [self.expr()]
                while True:
                    k2, v2, p2 = self.peek()
                    if k2 == "op" and v2 == ",":
                        self.advance()
                        args.append(self.expr())
                    else:
                        break
                _, _, endpos = self.expect_op(")")
                if not self.lenient:
                    if val not in BUILTINS:
                        raise ParseError(f"unknown function {val!r}", pos)
                    if len(args) != 1:
                        raise ParseError(f"{val!r} takes exactly one argument", pos)
                return Call(val, tuple(args), Span(pos, endpos + 1))
            return Ident(val, Span(pos, pos + len(val)))
        raise ParseError(f"expected a value, found {val!r}" if val else "unexpected end of input", pos)


def _walk(node: Expr):
    yield node
    if isinstance(node, Neg):
        yield from _walk(node.operand)
    elif isinstance(node, BinOp):
        yield from _walk(node.left)
        yield from _walk(node.right)
    elif isinstance(node, Call):
        for a in node.args:
            yield from _walk(a)


def _number_nodes(expr: Expr) -> "dict[int, Expr]":
    """Assign stable preorder node ids (frozen-aggregate keys)."""
    out = {}
    for i, node in enumerate(_walk(expr)):
        object.__setattr__(node, "node_id", i)
        out[i] = node
    return out


def parse_expr(text: str) -> Expr:
    """Parse to an AST with source spans; rejects unknown functions and nested aggregates."""
    expr = _Parser(text, lenient=False).parse()
    _check_no_nested_aggregates(expr)
    _number_nodes(expr)
    return expr


def parse_expr_lenient(text: str) -> Expr:
    """Parse keeping unknown identifiers/calls; used by the auditor."""
    expr = _Parser(text, lenient=True).parse()
    _number_nodes(expr)
    return expr


def _check_no_nested_aggregates(node: Expr, inside_agg: bool = False):
    if isinstance(node, Call) and node.func in AGGREGATES:
        if inside_agg:
            raise ParseError(f"nested aggregate {node.func!r}", node.span.start)
        inside_agg = True
    if isinstance(node, Neg):
        _check_no_nested_aggregates(node.operand, inside_agg)
    elif isinstance(node, BinOp):
        _check_no_nested_aggregates(node.left, inside_agg)
        _check_no_nested_aggregates(node.right, inside_agg)
    elif isinstance(node, Call):
        for a in node.args:
            _check_no_nested_aggregates(a, inside_agg)


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def print_expr(node: Expr) -> str:
    """Canonical rendering; parse(print_expr(parse(t))) is a structural fixpoint."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Ident):
        return node.name
    if isinstance(node, Neg):
        inner = print_expr(node.operand)
        if isinstance(node.operand, BinOp):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Call):
        return f"{node.func}(" + ", ".join(print_expr(a) for a in node.args) + ")"
    lhs = print_expr(node.left)
    rhs = print_expr(node.right)
    if isinstance(node.left, BinOp) and _PREC[node.left.op] < _PREC[node.op]:
        lhs = f"({lhs})"
    if isinstance(node.right, BinOp) and _PREC[node.right.op] <= _PREC[node.op]:
        rhs = f"({rhs})"
    return f"{lhs} {node.op} {rhs}"


def same_structure(a: Expr, b: Expr) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, Num):
        return a.value == b.value
    if isinstance(a, Ident):
        return a.name == b.name
    if isinstance(a, Neg):
        return same_structure(a.operand, b.operand)
    if isinstance(a, BinOp):
        return a.op == b.op and same_structure(a.left, b.left) and same_structure(a.right, b.right)
    return a.func == b.func and len(a.args) == len(b.args) and all(
        same_structure(x, y) for x, y in zip(a.args, b.args)
    )


def column_refs(expr: Expr) -> set[str]:
    return {n.name for n in _walk(expr) if isinstance(n, Ident)}


# ----------------------------------------------------------------------------
# Two-phase evaluation


@dataclass(frozen=True)
class FrozenAggregates:
    """Aggregate-node id -> value estimated on analysis rows only."""
    values: tuple[tuple[int, float], ...]

    def as_dict(self) -> dict[int, float]:
        return dict(self.values)


_AGG_FUNCS = {
    "mean": np.mean,
    "sd": lambda v: np.std(v, ddof=1) if v.size > 1 else np.nan,
    "median": np.median,
    "min": np.min,
    "max": np.max,
    "q25": lambda v: np.quantile(v, 0.25),
    "q75": lambda v: np.quantile(v, 0.75),
}


@dataclass
class EvalWarning:
    rule: str
    message: str
    span: Span | None = None


def _column_values(name: str, data: Dataset) -> np.ndarray:
    if not data.has_column(name):
        raise EvalError(f"unknown column {name!r}")
    col = data.column(name)
    if col.kind is not ColumnKind.NUMERIC:
        raise EvalError(f"column {name!r} is not numeric")
    return col.values


def _eval_rowwise(node: Expr, data: Dataset, frozen: dict[int, float],
                  warnings: list[EvalWarning]) -> np.ndarray:
    n = data.n_rows
    if isinstance(node, Num):
        return np.full(n, node.value)
    if isinstance(node, Ident):
        return _column_values(node.name, data).astype(np.float64)
    if isinstance(node, Neg):
        return -_eval_rowwise(node.operand, data, frozen, warnings)
    if isinstance(node, Call):
        if node.func in AGGREGATES:
            if node.node_id not in frozen:
                raise EvalError(f"no frozen value for aggregate {node.func!r} (node {node.node_id})")
            return np.full(n, frozen[node.node_id])
        arg = _eval_rowwise(node.args[0], data, frozen, warnings)
        if node.func == "log":
            bad = ~np.isnan(arg) & (arg <= 0)
            out = np.log(np.where(bad, np.nan, arg))
            if bad.any():
                warnings.append(EvalWarning("log-domain", "log of nonpositive value", node.span))
            return out
        if node.func == "exp":
            return np.exp(arg)
        if node.func == "abs":
            return np.abs(arg)
        if node.func == "sqrt":
            bad = ~np.isnan(arg) & (arg < 0)
            out = np.sqrt(np.where(bad, np.nan, arg))
            if bad.any():
                warnings.append(EvalWarning("sqrt-domain", "sqrt of negative value", node.span))
            return out
        raise EvalError(f"unknown function {node.func!r}")
    left = _eval_rowwise(node.left, data, frozen, warnings)
    right = _eval_rowwise(node.right, data, frozen, warnings)
    if node.op == "+":
        return left + right
    if node.op == "-":
        return left - right
    if node.op == "*":
        return left * right
    zero = ~np.isnan(right) & (right == 0)
    if zero.any():
        warnings.append(EvalWarning("div-zero", "division by zero", node.span))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(zero, np.nan, left / right)


def fit_expr(expr: Expr, analysis: Dataset) -> FrozenAggregates:
    """Evaluate every aggregate on analysis rows only, ignoring missing values."""
    frozen: list[tuple[int, float]] = []
    for node in _walk(expr):
        if isinstance(node, Call) and node.func in AGGREGATES:
            warnings: list[EvalWarning] = []
            arg = _eval_rowwise(node.args[0], analysis, {}, warnings)
            finite = arg[~np.isnan(arg)]
            if finite.size == 0:
                raise EvalError(f"aggregate {node.func!r} over an all-missing column")
            frozen.append((node.node_id, float(_AGG_FUNCS[node.func](finite))))
    return FrozenAggregates(tuple(frozen))


def apply_expr(expr: Expr, frozen: FrozenAggregates, data: Dataset) -> tuple[np.ndarray, list[EvalWarning]]:
    """Rowwise evaluation with frozen aggregates; missing inputs propagate to missing outputs."""
    warnings: list[EvalWarning] = []
    values = _eval_rowwise(expr, data, frozen.as_dict(), warnings)
    return values, warnings


# ----------------------------------------------------------------------------
# Static audit


@dataclass(frozen=True)
class AuditFinding:
    severity: str          # "reject" | "warn"
    rule: str              # "R1".."R4", "syntax", structural recipe rules
    message: str
    span: Span | None = None

    def render(self) -> str:
        loc = f" [{self.span.start}:{self.span.end}]" if self.span else ""
        return f"{self.severity.upper()} {self.rule}: {self.message}{loc}"


def _io_suggestive(name: str) -> bool:
    low = name.lower()
    return any(tok in low for tok in IO_TOKENS)


def audit_expr(expr_or_text, columns: Iterable[str] | None = None) -> list[AuditFinding]:
    """Static rules over the AST, so formatting cannot hide findings.

    R1: identifier that is neither a dataset column nor a builtin -> reject.
        Without a known column set, only call-position identifiers are checked;
        bare names are re-audited with the schema before any fit.
    R2: I/O-suggestive identifier -> reject.
    R3: more than 25 inline numeric literals (embedded data object) -> reject.
    Unparseable text is itself a reject finding (fail closed).
    """
    findings: list[AuditFinding] = []
    if isinstance(expr_or_text, str):
        try:
            expr = parse_expr_lenient(expr_or_text)
        except ParseError as e:
            return [AuditFinding("reject", "syntax", str(e))]
    else:
        expr = expr_or_text

    known = set(columns) if columns is not None else None
    n_literals = 0
    for node in _walk(expr):
        if isinstance(node, Num):
            n_literals += 1
        elif isinstance(node, Call):
            if _io_suggestive(node.func):
                findings.append(AuditFinding(
                    "reject", "R2", f"I/O-suggestive identifier {node.func!r}", node.span))
            if node.func not in BUILTINS:
                findings.append(AuditFinding(
                    "reject", "R1", f"unknown function {node.func!r}", node.span))
        elif isinstance(node, Ident):
            if _io_suggestive(node.name):
                findings.append(AuditFinding(
                    "reject", "R2", f"I/O-suggestive identifier {node.name!r}", node.span))
            elif known is not None and node.name not in known:
                findings.append(AuditFinding(
                    "reject", "R1", f"unknown identifier {node.name!r}", node.span))
    if n_literals > MAX_INLINE_LITERALS:
        findings.append(AuditFinding(
            "reject", "R3",
            f"{n_literals} inline numeric literals exceed the limit of {MAX_INLINE_LITERALS} "
            "(embedded data object)"))
    return findings
