"""Personal-data type declarations: parser, validator and canonical printer.

A declaration looks like::

    type user {
      fields {
        name: string,
        year_of_birthdate: int
      };
      view v_ano {
        year_of_birthdate
      };
      consent {
        purpose1: all,
        purpose3: v_ano
      };
      collection {
        web_form: user_form.html
      };
      origin: subject;
      age: 1Y;
      sensitivity: high;
    }

Every block except ``fields`` is optional. Missing blocks fall back to the
most restrictive reading (see ``DEFAULT_*`` below). ``//`` starts a comment.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .errors import DslSyntaxError, DuplicateName, DuplicateType, UnknownField, UnknownView

SCALAR_TYPES = ("string", "int", "float", "bool", "date")
ORIGINS = ("subject", "sysadmin", "third_party")
SENSITIVITIES = ("low", "medium", "high")
DURATION_UNITS = ("D", "M", "Y")

DEFAULT_ORIGIN = "subject"
DEFAULT_SENSITIVITY = "high"

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_BARE_WORD_RE = re.compile(r"[A-Za-z0-9_./\-]+\Z")
_DURATION_RE = re.compile(r"([0-9]+)([DMY])\Z")
_RESERVED_VIEW_NAMES = ("all", "none")


@dataclass(frozen=True, order=True)
class Duration:
    magnitude: int
    unit: str

    def __post_init__(self):
        if self.unit not in DURATION_UNITS:
            raise ValueError(f"bad duration unit {self.unit!r}")
        if self.magnitude < 1:
            raise ValueError("duration magnitude must be >= 1")

    def __str__(self) -> str:
        return f"{self.magnitude}{self.unit}"


DEFAULT_TTL = Duration(1, "D")


def parse_duration(text: str) -> Duration:
    m = _DURATION_RE.match(text.strip())
    if not m:
        raise DslSyntaxError(f"bad duration {text!r}", expected={"<digits>D", "<digits>M", "<digits>Y"})
    magnitude = int(m.group(1))
    if magnitude < 1:
        raise DslSyntaxError(f"duration must be positive, got {text!r}")
    return Duration(magnitude, m.group(2))


@dataclass(frozen=True)
class Grant:
    """A consent value: ``all``, ``none``, a named view or an explicit field set.

    The ``fields`` variant never appears in declaration files; it is produced
    when membranes are derived from several inputs.
    """

    kind: str
    view: str | None = None
    fields: frozenset[str] = frozenset()

    @classmethod
    def of_view(cls, name: str) -> Grant:
        return cls("view", view=name)

    @classmethod
    def of_fields(cls, names: Iterable[str]) -> Grant:
        names = frozenset(names)
        if not names:
            return NONE
        return cls("fields", fields=names)

    def __str__(self) -> str:
        if self.kind == "view":
            return f"view:{self.view}"
        if self.kind == "fields":
            return "fields:" + ",".join(sorted(self.fields))
        return self.kind

    @classmethod
    def parse(cls, text: str) -> Grant:
        if text == "all":
            return ALL
        if text == "none":
            return NONE
        if text.startswith("view:"):
            return cls.of_view(text[5:])
        if text.startswith("fields:"):
            return cls.of_fields(f for f in text[7:].split(",") if f)
        # bare view name, as written in declaration files and on the CLI
        if _IDENT_RE.match(text):
            return cls.of_view(text)
        raise ValueError(f"bad grant {text!r}")


ALL = Grant("all")
NONE = Grant("none")


@dataclass(frozen=True)
class ViewDecl:
    name: str
    members: frozenset[str]


@dataclass(frozen=True)
class TypeDecl:
    name: str
    fields: tuple[tuple[str, str], ...]
    views: tuple[ViewDecl, ...] = ()
    default_consent: Mapping[str, Grant] = field(default_factory=dict)
    collection: Mapping[str, str] = field(default_factory=dict)
    origin: str = DEFAULT_ORIGIN
    ttl: Duration = DEFAULT_TTL
    sensitivity: str = DEFAULT_SENSITIVITY
    validated: bool = field(default=False, compare=False)

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.fields)

    def field_type(self, name: str) -> str:
        for fname, ftype in self.fields:
            if fname == name:
                return ftype
        raise UnknownField(self.name, name)

    def view(self, name: str) -> ViewDecl | None:
        for v in self.views:
            if v.name == name:
                return v
        return None


# -- lexer ------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>//[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<punct>[{}:;,])
  | (?P<word>[A-Za-z0-9_./\-]+)
""", re.VERBOSE)


@dataclass(frozen=True)
class _Token:
    kind: str  # word | string | punct | eof
    value: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise DslSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "string":
            try:
                value = json.loads(m.group())
            except ValueError:
                raise DslSyntaxError("bad string literal", line, col) from None
            tokens.append(_Token("string", value, line, col))
        elif kind in ("punct", "word"):
            tokens.append(_Token(kind, m.group(), line, col))
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


# -- parser -----------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.pos]

    def error(self, message: str, expected: Iterable[str] = ()) -> DslSyntaxError:
        t = self.tok
        found = "end of input" if t.kind == "eof" else repr(t.value)
        return DslSyntaxError(f"{message}, found {found}", t.line, t.column, set(expected))

    def advance(self) -> _Token:
        t = self.tok
        self.pos += 1
        return t

    def at(self, value: str) -> bool:
        return self.tok.kind in ("punct", "word") and self.tok.value == value

    def expect(self, value: str) -> _Token:
        if not self.at(value):
            raise self.error(f"expected {value!r}", {repr(value)})
        return self.advance()

    def ident(self, what: str) -> str:
        t = self.tok
        if t.kind != "word" or not _IDENT_RE.match(t.value):
            raise self.error(f"expected {what}", {what})
        self.advance()
        return t.value

    def word(self, what: str) -> str:
        t = self.tok
        if t.kind not in ("word", "string"):
            raise self.error(f"expected {what}", {what})
        self.advance()
        return t.value

    def parse_file(self) -> list[TypeDecl]:
        decls = []
        while self.tok.kind != "eof":
            if not self.at("type"):
                raise self.error("expected type declaration", {"'type'"})
            decls.append(self.parse_type())
        return decls

    def parse_type(self) -> TypeDecl:
        type_tok = self.expect("type")
        name = self.ident("type name")
        self.expect("{")
        fields = None
        views: list[ViewDecl] = []
        consent = None
        collection = None
        scalars: dict[str, object] = {}
        while not self.at("}"):
            start = self.tok
            key = self.ident("block keyword")
            if key == "fields":
                if fields is not None:
                    raise DuplicateName(f"{name}: duplicate fields block at line {start.line}")
                fields = self.parse_fields(name)
            elif key == "view":
                views.append(self.parse_view(name, views))
            elif key == "consent":
                if consent is not None:
                    raise DuplicateName(f"{name}: duplicate consent block at line {start.line}")
                consent = self.parse_mapping(name, "purpose", self.parse_grant_value)
            elif key == "collection":
                if collection is not None:
                    raise DuplicateName(f"{name}: duplicate collection block at line {start.line}")
                collection = self.parse_mapping(name, "collection source", lambda: self.word("source descriptor"))
            elif key in ("origin", "age", "sensitivity"):
                if key in scalars:
                    raise DuplicateName(f"{name}: duplicate {key} entry at line {start.line}")
                self.expect(":")
                scalars[key] = self.parse_scalar_entry(key)
            else:
                self.pos -= 1
                raise self.error("unknown block", {"fields", "view", "consent", "collection",
                                                   "origin", "age", "sensitivity", "'}'"})
            self.expect(";")
        self.expect("}")
        if fields is None:
            raise DslSyntaxError(f"type {name} has no fields block", type_tok.line, type_tok.column, {"fields"})
        return TypeDecl(
            name=name,
            fields=fields,
            views=tuple(views),
            default_consent=consent or {},
            collection=collection or {},
            origin=scalars.get("origin", DEFAULT_ORIGIN),
            ttl=scalars.get("age", DEFAULT_TTL),
            sensitivity=scalars.get("sensitivity", DEFAULT_SENSITIVITY),
        )

    def parse_fields(self, type_name: str) -> tuple[tuple[str, str], ...]:
        self.expect("{")
        out: list[tuple[str, str]] = []
        seen = set()
        while True:
            fname = self.ident("field name")
            self.expect(":")
            ftype = self.tok.value
            if self.tok.kind != "word" or ftype not in SCALAR_TYPES:
                raise self.error("expected scalar type", SCALAR_TYPES)
            self.advance()
            if fname in seen:
                raise DuplicateName(f"{type_name}: duplicate field {fname!r}")
            seen.add(fname)
            out.append((fname, ftype))
            if not self.at(","):
                break
            self.advance()
        self.expect("}")
        return tuple(out)

    def parse_view(self, type_name: str, existing: list[ViewDecl]) -> ViewDecl:
        vname = self.ident("view name")
        if vname in _RESERVED_VIEW_NAMES:
            self.pos -= 1
            raise self.error(f"{vname!r} is reserved and cannot name a view")
        if any(v.name == vname for v in existing):
            raise DuplicateName(f"{type_name}: duplicate view {vname!r}")
        self.expect("{")
        members = [self.ident("field name")]
        while self.at(","):
            self.advance()
            members.append(self.ident("field name"))
        self.expect("}")
        if len(set(members)) != len(members):
            raise DuplicateName(f"{type_name}: view {vname!r} lists a field twice")
        return ViewDecl(vname, frozenset(members))

    def parse_mapping(self, type_name, what, value_fn) -> dict:
        self.expect("{")
        out: dict = {}
        if self.at("}"):
            self.advance()
            return out
        while True:
            key = self.ident(f"{what} name")
            self.expect(":")
            value = value_fn()
            if key in out:
                raise DuplicateName(f"{type_name}: duplicate {what} {key!r}")
            out[key] = value
            if not self.at(","):
                break
            self.advance()
        self.expect("}")
        return out

    def parse_grant_value(self) -> Grant:
        value = self.ident("grant (all, none or a view name)")
        if value == "all":
            return ALL
        if value == "none":
            return NONE
        return Grant.of_view(value)

    def parse_scalar_entry(self, key: str):
        t = self.tok
        if t.kind != "word":
            raise self.error(f"expected {key} value")
        if key == "origin":
            if t.value not in ORIGINS:
                raise self.error("bad origin", ORIGINS)
            self.advance()
            return t.value
        if key == "sensitivity":
            if t.value not in SENSITIVITIES:
                raise self.error("bad sensitivity", SENSITIVITIES)
            self.advance()
            return t.value
        try:
            duration = parse_duration(t.value)
        except DslSyntaxError as exc:
            raise DslSyntaxError(str(exc), t.line, t.column, exc.expected) from None
        self.advance()
        return duration


def parse_type_file(text: str) -> list[TypeDecl]:
    """Parse every type declaration in ``text``, in file order."""
    return _Parser(text).parse_file()


def validate(decl: TypeDecl, catalog: Iterable[str] = ()) -> TypeDecl:
    """Resolve cross references; return ``decl`` with its validity flag set."""
    if decl.name in set(catalog):
        raise DuplicateType(decl.name)
    declared = set(decl.field_names)
    if not declared:
        raise DslSyntaxError(f"type {decl.name} declares no fields")
    for v in decl.views:
        if not v.members:
            raise DslSyntaxError(f"view {v.name} is empty")
        for member in sorted(v.members):
            if member not in declared:
                raise UnknownField(v.name, member)
    for purpose, grant in decl.default_consent.items():
        if grant.kind == "view" and decl.view(grant.view) is None:
            raise UnknownView(purpose, grant.view)
        if grant.kind == "fields":
            raise DslSyntaxError(f"consent {purpose}: field-set grants are not declarable")
    return replace(decl, validated=True)


# -- canonical printer ------------------------------------------------------

def _descriptor(text: str) -> str:
    if _BARE_WORD_RE.match(text):
        return text
    return json.dumps(text, ensure_ascii=False)


def _grant_text(grant: Grant) -> str:
    return grant.view if grant.kind == "view" else grant.kind


def _block(lines: list[str], header: str, items: list[str]) -> None:
    lines.append(f"  {header} {{")
    for i, item in enumerate(items):
        lines.append(f"    {item}{',' if i < len(items) - 1 else ''}")
    lines.append("  };")


def canonical_print(decl: TypeDecl) -> str:
    lines = [f"type {decl.name} {{"]
    _block(lines, "fields", [f"{n}: {t}" for n, t in decl.fields])
    for v in decl.views:
        _block(lines, f"view {v.name}", sorted(v.members))
    if decl.default_consent:
        _block(lines, "consent", [f"{p}: {_grant_text(g)}" for p, g in sorted(decl.default_consent.items())])
    if decl.collection:
        _block(lines, "collection", [f"{s}: {_descriptor(d)}" for s, d in sorted(decl.collection.items())])
    lines.append(f"  origin: {decl.origin};")
    lines.append(f"  age: {decl.ttl};")
    lines.append(f"  sensitivity: {decl.sensitivity};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def canonical_print_all(decls: Iterable[TypeDecl]) -> str:
    return "\n".join(canonical_print(d) for d in decls)

