"""Reader for the SAM surface syntax.

SAM source is Lisp-flavoured: parenthesized lists, bracketed condition
forms, keywords (``:inputs``), variables (``?cmd``), quoted names
(``'new-event``), strings and decimal literals such as ``.99``.  This module
turns text into a small immutable tree that the loader elaborates.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Iterator, Union


class SexprError(Exception):
    """Base class for lexical errors; carries a 1-based line and column."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column


class UnbalancedDelimiter(SexprError):
    pass


class UnterminatedString(SexprError):
    pass


class IllegalCharacter(SexprError):
    pass


@dataclass(frozen=True)
class Pos:
    line: int
    column: int

    def __str__(self):
        return f"{self.line}:{self.column}"


_NOPOS = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Symbol:
    name: str
    pos: Pos | None = _NOPOS


@dataclass(frozen=True)
class Keyword:
    name: str
    pos: Pos | None = _NOPOS


@dataclass(frozen=True)
class Var:
    name: str
    pos: Pos | None = _NOPOS

    @property
    def situation(self) -> tuple[str, str] | None:
        """``('before', X)`` for ``?before-X``, ``('after', X)`` for ``?after-X``."""
        for prefix in ("before-", "after-"):
            if self.name.startswith(prefix) and len(self.name) > len(prefix):
                return prefix[:-1], self.name[len(prefix):]
        return None


@dataclass(frozen=True)
class Quoted:
    inner: "SExpr"
    pos: Pos | None = _NOPOS


@dataclass(frozen=True)
class Str:
    value: str
    pos: Pos | None = _NOPOS


@dataclass(frozen=True)
class Num:
    text: str
    pos: Pos | None = _NOPOS

    @property
    def value(self) -> Decimal:
        return Decimal(self.text)


@dataclass(frozen=True)
class List:
    items: tuple["SExpr", ...]
    pos: Pos | None = _NOPOS

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


@dataclass(frozen=True)
class Bracket:
    items: tuple["SExpr", ...]
    pos: Pos | None = _NOPOS

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


SExpr = Union[Symbol, Keyword, Var, Quoted, Str, Num, List, Bracket]

_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")
_DELIMS = "()[]"
# characters that only make sense as reader macros or are never valid in SAM
_ILLEGAL = set("{}`,\\")
_CLOSER = {"(": ")", "[": "]"}


def _atom(text: str, pos: Pos) -> SExpr:
    if _NUMBER.match(text):
        return Num(text, pos)
    low = text.lower()
    if low.startswith(":") and len(low) > 1:
        return Keyword(low[1:], pos)
    if low.startswith("?") and len(low) > 1:
        return Var(low[1:], pos)
    return Symbol(low, pos)


class _Reader:
    def __init__(self, source: str):
        self.src = source
        self.i = 0
        self.line = 1
        self.col = 1

    def pos(self) -> Pos:
        return Pos(self.line, self.col)

    def advance(self) -> str:
        ch = self.src[self.i]
        self.i += 1
        if ch == "\n":
            self.line += 1
            self.col = 1
        else:
            self.col += 1
        return ch

    def skip_blank(self):
        src = self.src
        while self.i < len(src):
            ch = src[self.i]
            if ch == ";":
                while self.i < len(src) and src[self.i] != "\n":
                    self.advance()
            elif ch.isspace():
                self.advance()
            else:
                return

    def forms(self) -> Iterator[SExpr]:
        while True:
            self.skip_blank()
            if self.i >= len(self.src):
                return
            ch = self.src[self.i]
            if ch in ")]":
                raise UnbalancedDelimiter(f"unexpected '{ch}'", self.line, self.col)
            yield self.read()

    def read(self) -> SExpr:
        self.skip_blank()
        if self.i >= len(self.src):
            raise UnbalancedDelimiter("unexpected end of input", self.line, self.col)
        start = self.pos()
        ch = self.src[self.i]
        if ch in "([":
            return self.read_seq(ch, start)
        if ch in ")]":
            raise UnbalancedDelimiter(f"unexpected '{ch}'", start.line, start.column)
        if ch == "'":
            self.advance()
            self.skip_blank()
            if self.i >= len(self.src) or self.src[self.i] in ")]":
                raise UnbalancedDelimiter("quote without a datum", start.line, start.column)
            return Quoted(self.read(), start)
        if ch == '"':
            return self.read_string(start)
        return self.read_atom(start)

    def read_seq(self, opener: str, start: Pos) -> SExpr:
        closer = _CLOSER[opener]
        self.advance()
        items = []
        while True:
            self.skip_blank()
            if self.i >= len(self.src):
                raise UnbalancedDelimiter(f"'{opener}' is never closed", start.line, start.column)
            ch = self.src[self.i]
            if ch in ")]":
                if ch != closer:
                    raise UnbalancedDelimiter(
                        f"'{opener}' opened at {start} closed by '{ch}'", self.line, self.col)
                self.advance()
                break
            items.append(self.read())
        cls = List if opener == "(" else Bracket
        return cls(tuple(items), start)

    def read_string(self, start: Pos) -> Str:
        self.advance()
        out = []
        while self.i < len(self.src):
            ch = self.advance()
            if ch == '"':
                return Str("".join(out), start)
            if ch == "\\":
                if self.i >= len(self.src):
                    break
                out.append(self.advance())
            else:
                out.append(ch)
        raise UnterminatedString("string is never closed", start.line, start.column)

    def read_atom(self, start: Pos) -> SExpr:
        src = self.src
        j = self.i
        while j < len(src):
            ch = src[j]
            if ch.isspace() or ch in _DELIMS or ch in ";\"'":
                break
            if ch in _ILLEGAL or not ch.isprintable():
                # report the exact column of the offending character
                while self.i < j:
                    self.advance()
                raise IllegalCharacter(f"illegal character {ch!r}", self.line, self.col)
            j += 1
        text = src[self.i:j]
        while self.i < j:
            self.advance()
        return _atom(text, start)


def read_all(source: str) -> list[SExpr]:
    """Read every top-level form of ``source``; comments start with ``;``."""
    return list(_Reader(source).forms())


def iter_forms(source: str) -> Iterator[SExpr]:
    return _Reader(source).forms()


def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def to_text(e: SExpr) -> str:
    """Print ``e`` so that ``read_all(to_text(e)) == [e]``."""
    if isinstance(e, Symbol):
        return e.name
    if isinstance(e, Keyword):
        return ":" + e.name
    if isinstance(e, Var):
        return "?" + e.name
    if isinstance(e, Quoted):
        return "'" + to_text(e.inner)
    if isinstance(e, Str):
        return '"' + _escape(e.value) + '"'
    if isinstance(e, Num):
        return e.text
    if isinstance(e, List):
        return "(" + " ".join(to_text(x) for x in e.items) + ")"
    if isinstance(e, Bracket):
        return "[" + " ".join(to_text(x) for x in e.items) + "]"
    raise TypeError(f"not an s-expression: {e!r}")


def sym_name(e: SExpr) -> str | None:
    """Name of a bare symbol, else None."""
    return e.name if isinstance(e, Symbol) else None


def pos_of(e) -> Pos | None:
    return getattr(e, "pos", None)
