"""The processing language: purpose header plus a side-effect-free expression body.

A ``.pproc`` source looks like::

    name: compute_age
    purpose: purpose3
    input: user view v_ano
    output: int

    if has(year_of_birthdate)
    then current_year() - in.year_of_birthdate
    else fail("year_of_birthdate withheld")

The body can only read fields of the one input record (``in.f``, ``has(f)``),
compute, and build new records with ``new T{...}``. There is no I/O of any
kind, which makes the set of fields a body may touch statically computable.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from datetime import date
from typing import Callable, Mapping, Union

from .errors import (
    AbsentFieldRead,
    ArithmeticOverflow,
    DivisionByZero,
    DslSyntaxError,
    MissingPurpose,
    ProcessingFault,
    TypeFault,
    UnknownField,
    UnknownType,
    UnknownView,
)
from .pdtype import TypeDecl

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_INT_MIN, _INT_MAX = -(1 << 63), (1 << 63) - 1

KEYWORDS = frozenset({"if", "then", "else", "let", "in", "has", "new", "true", "false",
                      "and", "or", "not", "fail", "current_year"})


# -- AST --------------------------------------------------------------------

@dataclass(frozen=True)
class Lit:
    value: object


@dataclass(frozen=True)
class FieldRead:
    name: str


@dataclass(frozen=True)
class Has:
    name: str


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: Expr


@dataclass(frozen=True)
class Binary:
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class If:
    cond: Expr
    then: Expr
    orelse: Expr


@dataclass(frozen=True)
class Let:
    name: str
    value: Expr
    body: Expr


@dataclass(frozen=True)
class New:
    type_name: str
    fields: tuple[tuple[str, Expr], ...]


@dataclass(frozen=True)
class CurrentYear:
    pass


@dataclass(frozen=True)
class Fail:
    message: str = "processing failed"


Expr = Union[Lit, FieldRead, Has, Var, Unary, Binary, If, Let, New, CurrentYear, Fail]


@dataclass(frozen=True)
class RecordValue:
    """A record built by ``new``; becomes PD once the pipeline stores it."""

    type_name: str
    values: Mapping[str, object]


@dataclass(frozen=True)
class OutputKind:
    kind: str  # int | float | string | bool | pd
    pd_type: str | None = None

    def __str__(self) -> str:
        return f"pd {self.pd_type}" if self.kind == "pd" else self.kind

    @property
    def is_pd(self) -> bool:
        return self.kind == "pd"


@dataclass(frozen=True)
class Processing:
    name: str
    purpose: str
    input_type: str
    declared_view: str  # "all" or a view name
    output: OutputKind
    body: Expr
    accessed: frozenset[str]
    source: str = field(default="", compare=False)
    approved: bool = False


# -- lexer ------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>//[^\n]*)
  | (?P<float>[0-9]+\.[0-9]+)
  | (?P<int>[0-9]+)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|!=|<=|>=|[-+*/<>(){},:.=])
""", re.VERBOSE)


@dataclass(frozen=True)
class _Tok:
    kind: str
    value: object
    line: int
    column: int


def _tokenize(text: str, first_line: int = 1) -> list[_Tok]:
    out = []
    pos, line, line_start = 0, first_line, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise DslSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind, raw, col = m.lastgroup, m.group(), pos - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "int":
            out.append(_Tok("int", int(raw), line, col))
        elif kind == "float":
            out.append(_Tok("float", float(raw), line, col))
        elif kind == "string":
            out.append(_Tok("string", _unescape(raw, line, col), line, col))
        elif kind == "ident":
            out.append(_Tok("kw" if raw in KEYWORDS else "ident", raw, line, col))
        elif kind == "op":
            out.append(_Tok("op", raw, line, col))
        pos = m.end()
    out.append(_Tok("eof", "", line, pos - line_start + 1))
    return out


def _unescape(raw: str, line: int, col: int) -> str:
    try:
        return json.loads(raw)
    except ValueError:
        raise DslSyntaxError("bad string literal", line, col) from None


# -- parser -----------------------------------------------------------------

class _ExprParser:
    _CMP = ("==", "!=", "<", "<=", ">", ">=")

    def __init__(self, text: str, first_line: int):
        self.toks = _tokenize(text, first_line)
        self.i = 0
        self.scope: list[str] = []

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg: str, expected=()) -> DslSyntaxError:
        t = self.tok
        found = "end of input" if t.kind == "eof" else repr(t.value)
        return DslSyntaxError(f"{msg}, found {found}", t.line, t.column, set(expected))

    def at(self, value: str) -> bool:
        return self.tok.kind in ("op", "kw") and self.tok.value == value

    def eat(self, value: str) -> _Tok:
        if not self.at(value):
            raise self.error(f"expected {value!r}", {repr(value)})
        t = self.tok
        self.i += 1
        return t

    def ident(self) -> str:
        if self.tok.kind != "ident":
            raise self.error("expected identifier", {"identifier"})
        t = self.tok
        self.i += 1
        return t.value

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "eof":
            raise self.error("unexpected trailing input", {"end of input"})
        return e

    def expr(self) -> Expr:
        if self.at("if"):
            self.eat("if")
            cond = self.expr()
            self.eat("then")
            then = self.expr()
            self.eat("else")
            return If(cond, then, self.expr())
        if self.at("let"):
            self.eat("let")
            name = self.ident()
            self.eat("=")
            value = self.expr()
            self.eat("in")
            self.scope.append(name)
            try:
                body = self.expr()
            finally:
                self.scope.pop()
            return Let(name, value, body)
        return self.or_expr()

    def or_expr(self) -> Expr:
        e = self.and_expr()
        while self.at("or"):
            self.eat("or")
            e = Binary("or", e, self.and_expr())
        return e

    def and_expr(self) -> Expr:
        e = self.not_expr()
        while self.at("and"):
            self.eat("and")
            e = Binary("and", e, self.not_expr())
        return e

    def not_expr(self) -> Expr:
        if self.at("not"):
            self.eat("not")
            return Unary("not", self.not_expr())
        return self.cmp_expr()

    def cmp_expr(self) -> Expr:
        e = self.add_expr()
        if self.tok.kind == "op" and self.tok.value in self._CMP:
            op = self.tok.value
            self.i += 1
            e = Binary(op, e, self.add_expr())
            if self.tok.kind == "op" and self.tok.value in self._CMP:
                raise self.error("comparisons do not chain; use parentheses")
        return e

    def add_expr(self) -> Expr:
        e = self.mul_expr()
        while self.at("+") or self.at("-"):
            op = self.tok.value
            self.i += 1
            e = Binary(op, e, self.mul_expr())
        return e

    def mul_expr(self) -> Expr:
        e = self.unary()
        while self.at("*") or self.at("/"):
            op = self.tok.value
            self.i += 1
            e = Binary(op, e, self.unary())
        return e

    def unary(self) -> Expr:
        if self.at("-"):
            self.eat("-")
            return Unary("-", self.unary())
        return self.primary()

    def primary(self) -> Expr:
        t = self.tok
        if t.kind in ("int", "float", "string"):
            self.i += 1
            return Lit(t.value)
        if self.at("true") or self.at("false"):
            self.i += 1
            return Lit(t.value == "true")
        if self.at("("):
            self.eat("(")
            e = self.expr()
            self.eat(")")
            return e
        if self.at("in"):
            self.eat("in")
            self.eat(".")
            return FieldRead(self.ident())
        if self.at("has"):
            self.eat("has")
            self.eat("(")
            name = self.ident()
            self.eat(")")
            return Has(name)
        if self.at("current_year"):
            self.eat("current_year")
            self.eat("(")
            self.eat(")")
            return CurrentYear()
        if self.at("fail"):
            self.eat("fail")
            if self.at("("):
                self.eat("(")
                if self.tok.kind != "string":
                    raise self.error("expected failure message", {"string"})
                msg = self.tok.value
                self.i += 1
                self.eat(")")
                return Fail(msg)
            return Fail()
        if self.at("new"):
            self.eat("new")
            type_name = self.ident()
            self.eat("{")
            items: list[tuple[str, Expr]] = []
            if not self.at("}"):
                while True:
                    fname = self.ident()
                    if any(fname == n for n, _ in items):
                        raise self.error(f"field {fname!r} given twice")
                    self.eat(":")
                    items.append((fname, self.expr()))
                    if not self.at(","):
                        break
                    self.eat(",")
            self.eat("}")
            return New(type_name, tuple(items))
        if t.kind == "ident":
            if t.value not in self.scope:
                raise self.error(f"unbound name {t.value!r} (input fields are read as in.{t.value})")
            self.i += 1
            return Var(t.value)
        raise self.error("expected expression", {"literal", "in.<field>", "has(...)", "if", "let", "new", "("})


def parse_expression(text: str, first_line: int = 1) -> Expr:
    return _ExprParser(text, first_line).parse()


# -- processing files -------------------------------------------------------

def _parse_header(text: str) -> tuple[dict[str, tuple[str, int]], str, int]:
    header: dict[str, tuple[str, int]] = {}
    lines = text.split("\n")
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            break
        if line.startswith("//"):
            i += 1
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not header and key not in ("name", "purpose", "input", "output"):
            raise MissingPurpose("source has no header, so no purpose is declared")
        if not sep or key not in ("name", "purpose", "input", "output"):
            raise DslSyntaxError(f"bad header line {line!r}", i + 1, 1,
                                 {"name:", "purpose:", "input:", "output:", "blank line"})
        if key in header:
            raise DslSyntaxError(f"duplicate header {key!r}", i + 1, 1)
        header[key] = (value.strip(), i + 1)
        i += 1
    body_start = i + 1
    return header, "\n".join(lines[i + 1:]), body_start + 1


def parse_processing(text: str, catalog: Mapping[str, TypeDecl] | None = None,
                     name: str | None = None) -> Processing:
    """Parse a ``.pproc`` source; with a catalog, also check every type and field reference."""
    header, body_text, body_line = _parse_header(text)
    purpose = header.get("purpose", ("", 0))[0]
    if not purpose:
        raise MissingPurpose("processing declares no purpose")
    if not _IDENT_RE.match(purpose):
        raise DslSyntaxError(f"bad purpose name {purpose!r}", header["purpose"][1], 1)
    name = header.get("name", (name or "", 0))[0] or name
    if not name or not _IDENT_RE.match(name):
        raise DslSyntaxError(f"bad or missing processing name {name!r}", header.get("name", ("", 0))[1], 1, {"name:"})

    if "input" not in header:
        raise DslSyntaxError("missing input header", 0, 0, {"input:"})
    parts = header["input"][0].split()
    if len(parts) == 1:
        input_type, declared_view = parts[0], "all"
    elif len(parts) == 3 and parts[1] == "view":
        input_type, declared_view = parts[0], parts[2]
    elif len(parts) == 2 and parts[1] == "all":
        input_type, declared_view = parts[0], "all"
    else:
        raise DslSyntaxError(f"bad input header {header['input'][0]!r}", header["input"][1], 1,
                             {"<type>", "<type> all", "<type> view <name>"})

    if "output" not in header:
        raise DslSyntaxError("missing output header", 0, 0, {"output:"})
    out_parts = header["output"][0].split()
    if len(out_parts) == 1 and out_parts[0] in ("int", "float", "string", "bool"):
        output = OutputKind(out_parts[0])
    elif len(out_parts) == 2 and out_parts[0] == "pd" and _IDENT_RE.match(out_parts[1]):
        output = OutputKind("pd", out_parts[1])
    else:
        raise DslSyntaxError(f"bad output header {header['output'][0]!r}", header["output"][1], 1,
                             {"int", "float", "string", "bool", "pd <type>"})

    if not body_text.strip():
        raise DslSyntaxError("empty processing body", body_line, 1, {"expression"})
    body = parse_expression(body_text, body_line)
    proc = Processing(
        name=name,
        purpose=purpose,
        input_type=input_type,
        declared_view=declared_view,
        output=output,
        body=body,
        accessed=static_field_analysis(body),
        source=text,
    )
    if catalog is not None:
        check_references(proc, catalog)
    return proc


def check_references(p: Processing, catalog: Mapping[str, TypeDecl]) -> None:
    decl = catalog.get(p.input_type)
    if decl is None:
        raise UnknownType(p.input_type)
    if p.declared_view != "all" and decl.view(p.declared_view) is None:
        raise UnknownView(p.purpose, p.declared_view)
    for f in sorted(p.accessed):
        if f not in decl.field_names:
            raise UnknownField(p.name, f)
    if p.output.is_pd and p.output.pd_type not in catalog:
        raise UnknownType(p.output.pd_type)
    for node in _walk(p.body):
        if isinstance(node, New):
            target = catalog.get(node.type_name)
            if target is None:
                raise UnknownType(node.type_name)
            given = [n for n, _ in node.fields]
            for n in given:
                if n not in target.field_names:
                    raise UnknownField(node.type_name, n)
            missing = [f for f in target.field_names if f not in given]
            if missing:
                raise UnknownField(node.type_name, missing[0])


def declared_fields(p: Processing, decl: TypeDecl) -> frozenset[str]:
    if p.declared_view == "all":
        return frozenset(decl.field_names)
    view = decl.view(p.declared_view)
    return view.members if view is not None else frozenset()


# -- static analysis --------------------------------------------------------

def _walk(e: Expr):
    yield e
    if isinstance(e, Unary):
        yield from _walk(e.operand)
    elif isinstance(e, Binary):
        yield from _walk(e.left)
        yield from _walk(e.right)
    elif isinstance(e, If):
        yield from _walk(e.cond)
        yield from _walk(e.then)
        yield from _walk(e.orelse)
    elif isinstance(e, Let):
        yield from _walk(e.value)
        yield from _walk(e.body)
    elif isinstance(e, New):
        for _, sub in e.fields:
            yield from _walk(sub)


def static_field_analysis(p: Processing | Expr) -> frozenset[str]:
    """Every input field the body could read on any path, presence tests included."""
    body = p.body if isinstance(p, Processing) else p
    return frozenset(n.name for n in _walk(body) if isinstance(n, (FieldRead, Has)))


# -- evaluation -------------------------------------------------------------

Clock = Union[int, Callable[[], int]]


def _kind(v: object) -> str:
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, int):
        return "int"
    if isinstance(v, float):
        return "float"
    if isinstance(v, str):
        return "string"
    if isinstance(v, date):
        return "date"
    return "record"


def _check_int(v: int) -> int:
    if not _INT_MIN <= v <= _INT_MAX:
        raise ArithmeticOverflow(f"integer overflow: {v}")
    return v


def _check_float(v: float) -> float:
    if not math.isfinite(v):
        raise ArithmeticOverflow("float overflow")
    return v


class _Evaluator:
    def __init__(self, record: Mapping[str, object], clock: Clock, trace: set[str] | None):
        self.record = record
        self.clock = clock
        self.trace = trace

    def run(self, e: Expr, env: dict[str, object]) -> object:
        method = getattr(self, "e_" + type(e).__name__)
        return method(e, env)

    def e_Lit(self, e: Lit, env):
        return e.value

    def e_FieldRead(self, e: FieldRead, env):
        if self.trace is not None:
            self.trace.add(e.name)
        if e.name not in self.record:
            raise AbsentFieldRead(f"field {e.name!r} is not visible to this processing")
        return self.record[e.name]

    def e_Has(self, e: Has, env):
        if self.trace is not None:
            self.trace.add(e.name)
        return e.name in self.record

    def e_Var(self, e: Var, env):
        return env[e.name]

    def e_CurrentYear(self, e, env):
        year = self.clock() if callable(self.clock) else self.clock
        return int(year)

    def e_Fail(self, e: Fail, env):
        raise ProcessingFault(e.message)

    def e_If(self, e: If, env):
        cond = self.run(e.cond, env)
        if not isinstance(cond, bool):
            raise TypeFault(f"if condition must be bool, got {_kind(cond)}")
        return self.run(e.then if cond else e.orelse, env)

    def e_Let(self, e: Let, env):
        inner = dict(env)
        inner[e.name] = self.run(e.value, env)
        return self.run(e.body, inner)

    def e_New(self, e: New, env):
        return RecordValue(e.type_name, {n: self.run(sub, env) for n, sub in e.fields})

    def e_Unary(self, e: Unary, env):
        v = self.run(e.operand, env)
        if e.op == "not":
            if not isinstance(v, bool):
                raise TypeFault(f"not expects bool, got {_kind(v)}")
            return not v
        k = _kind(v)
        if k == "int":
            return _check_int(-v)
        if k == "float":
            return -v
        raise TypeFault(f"unary minus expects a number, got {k}")

    def e_Binary(self, e: Binary, env):
        if e.op in ("and", "or"):
            left = self.run(e.left, env)
            if not isinstance(left, bool):
                raise TypeFault(f"{e.op} expects bool, got {_kind(left)}")
            if (e.op == "and" and not left) or (e.op == "or" and left):
                return left
            right = self.run(e.right, env)
            if not isinstance(right, bool):
                raise TypeFault(f"{e.op} expects bool, got {_kind(right)}")
            return right
        a = self.run(e.left, env)
        b = self.run(e.right, env)
        ka, kb = _kind(a), _kind(b)
        numeric = ka in ("int", "float") and kb in ("int", "float")
        if e.op in ("==", "!="):
            if not (numeric or ka == kb) or ka == "record":
                raise TypeFault(f"cannot compare {ka} with {kb}")
            return (a == b) if e.op == "==" else (a != b)
        if e.op in ("<", "<=", ">", ">="):
            if not (numeric or (ka == kb and ka in ("string", "date"))):
                raise TypeFault(f"cannot order {ka} and {kb}")
            return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[e.op]
        if e.op == "+" and ka == kb == "string":
            return a + b
        if not numeric:
            raise TypeFault(f"{e.op} expects numbers, got {ka} and {kb}")
        if ka == kb == "int":
            if e.op == "/":
                if b == 0:
                    raise DivisionByZero("integer division by zero")
                q = abs(a) // abs(b)
                return _check_int(q if (a >= 0) == (b >= 0) else -q)
            return _check_int({"+": a + b, "-": a - b, "*": a * b}[e.op])
        a, b = float(a), float(b)
        if e.op == "/":
            if b == 0.0:
                raise DivisionByZero("float division by zero")
            return _check_float(a / b)
        return _check_float({"+": a + b, "-": a - b, "*": a * b}[e.op])


def evaluate(p: Processing, record: Mapping[str, object], clock: Clock,
             *, trace: set[str] | None = None) -> object:
    """Run ``p`` on one (already minimized) record.

    ``record`` holds only the fields the purpose may see. ``trace``, when
    given, collects every field name the run actually touched.
    """
    result = _Evaluator(record, clock, trace).run(p.body, {})
    return _check_output(p, result)


def _check_output(p: Processing, result: object) -> object:
    want = p.output.kind
    got = _kind(result)
    if want == "pd":
        if not isinstance(result, RecordValue) or result.type_name != p.output.pd_type:
            raise TypeFault(f"expected a new {p.output.pd_type} record, got {got}")
        return result
    if want == "float" and got == "int":
        return float(result)
    if got != want:
        raise TypeFault(f"expected {want} result, got {got}")
    return result

