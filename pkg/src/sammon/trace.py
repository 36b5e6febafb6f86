"""Observations and their line-oriented encodings (JSON Lines or s-expressions)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import Decimal
from typing import Iterable, Iterator, Optional, Union

from . import sexpr as sx
from .semantics import ConditionError, Nil, NilValue, Number, ObjectRef, Text, Tuple, Value, literal_value

ENTRY = "entry"
EXIT = "exit"
TAGS = (ENTRY, EXIT)


class StreamDecodeError(Exception):
    def __init__(self, line: int, message: str):
        super().__init__(f"trace line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class FactOp:
    op: str  # "assert" | "retract"
    fact: tuple


@dataclass(frozen=True)
class Observation:
    event: str
    tag: str
    args: tuple = ()
    pid: int = 0
    ts: Union[int, str] = 0
    facts: tuple[FactOp, ...] = ()

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"tag must be entry or exit, got {self.tag!r}")

    def __str__(self):
        args = " ".join(str(a) for a in self.args)
        return f"({self.event} {self.tag} ({args}))"


# values ---------------------------------------------------------------------------


def encode_value(v: Value):
    if isinstance(v, Text):
        return v.value
    if isinstance(v, Number):
        i = int(v.value)
        return i if i == v.value and "." not in str(v.value) else float(v.value)
    if isinstance(v, NilValue):
        return None
    if isinstance(v, ObjectRef):
        return {"ref": v.id}
    if isinstance(v, Tuple):
        return [encode_value(x) for x in v.items]
    raise TypeError(f"cannot encode {v!r} in a trace")


def decode_value(j) -> Value:
    if j is None:
        return Nil
    if isinstance(j, bool):
        raise ValueError("booleans are not trace values")
    if isinstance(j, str):
        return Text(j)
    if isinstance(j, (int, float)):
        return Number(Decimal(str(j)))
    if isinstance(j, dict) and set(j) == {"ref"} and isinstance(j["ref"], str):
        return ObjectRef(j["ref"])
    if isinstance(j, list):
        return Tuple(tuple(decode_value(x) for x in j))
    raise ValueError(f"not a trace value: {j!r}")


def encode_fact(f: tuple) -> list:
    return [f[0], *(encode_value(v) for v in f[1:])]


def decode_fact(j) -> tuple:
    if not isinstance(j, list) or not j or not isinstance(j[0], str):
        raise ValueError("a fact is a list starting with a predicate name")
    return (j[0], *(decode_value(x) for x in j[1:]))


# observations -----------------------------------------------------------------------


def to_json(o: Observation) -> dict:
    d = {"event": o.event, "tag": o.tag, "args": [encode_value(a) for a in o.args],
         "pid": o.pid, "ts": o.ts}
    if o.facts:
        d["facts"] = [{"op": f.op, "fact": encode_fact(f.fact)} for f in o.facts]
    return d


def to_jsonl(o: Observation) -> str:
    return json.dumps(to_json(o), sort_keys=True, separators=(",", ":"))


def from_json(d, line: int = 0) -> Observation:
    try:
        if not isinstance(d, dict):
            raise ValueError("expected a JSON object")
        event = d["event"]
        if not isinstance(event, str):
            raise ValueError("event must be a string")
        args = tuple(decode_value(a) for a in d.get("args", []))
        facts = []
        for f in d.get("facts", []):
            op = f.get("op")
            if op not in ("assert", "retract"):
                raise ValueError(f"fact op must be assert or retract, got {op!r}")
            facts.append(FactOp(op, decode_fact(f.get("fact"))))
        pid = d.get("pid", 0)
        ts = d.get("ts", 0)
        if isinstance(pid, bool) or not isinstance(pid, int):
            raise ValueError("pid must be an integer")
        if isinstance(ts, bool) or not isinstance(ts, (int, str)):
            raise ValueError("ts must be an integer or ISO-8601 text")
        return Observation(event.lower(), d["tag"], args, pid, ts, tuple(facts))
    except (KeyError, ValueError, TypeError, AttributeError) as exc:
        raise StreamDecodeError(line, str(exc)) from None


def from_sexpr_line(text: str, line: int = 0) -> Observation:
    """Decode ``(name entry|exit (params) pid ts)``."""
    try:
        forms = sx.read_all(text)
    except sx.SexprError as exc:
        raise StreamDecodeError(line, str(exc)) from None
    if len(forms) != 1 or not isinstance(forms[0], sx.List):
        raise StreamDecodeError(line, "expected one (event tag (args) pid ts) form")
    f = forms[0]
    if not 2 <= len(f) <= 5:
        raise StreamDecodeError(line, "expected (event tag (args) pid ts)")
    try:
        name = sx.sym_name(f[0])
        tag = sx.sym_name(f[1])
        if name is None or tag not in TAGS:
            raise ValueError("expected an event name and entry or exit")
        args = ()
        if len(f) > 2:
            if not isinstance(f[2], sx.List):
                raise ValueError("arguments must be a list")
            args = tuple(literal_value(a) for a in f[2])
        pid = int(f[3].value) if len(f) > 3 and isinstance(f[3], sx.Num) else 0
        ts = 0
        if len(f) > 4:
            ts = int(f[4].value) if isinstance(f[4], sx.Num) else (
                f[4].value if isinstance(f[4], sx.Str) else sx.to_text(f[4]))
        return Observation(name, tag, args, pid, ts)
    except (ValueError, ConditionError) as exc:
        raise StreamDecodeError(line, str(exc)) from None


def decode_line(text: str, line: int = 0) -> Optional[Observation]:
    """Decode one trace line; blank lines and ``;`` comments yield None."""
    s = text.strip()
    if not s or s.startswith(";"):
        return None
    if s.startswith("("):
        return from_sexpr_line(s, line)
    try:
        d = json.loads(s)
    except json.JSONDecodeError as exc:
        raise StreamDecodeError(line, f"invalid JSON: {exc.msg}") from None
    return from_json(d, line)


def iter_observations(lines: Iterable[str]) -> Iterator[Observation]:
    """Lazily decode a trace; suitable for unbounded streams."""
    for n, text in enumerate(lines, 1):
        o = decode_line(text, n)
        if o is not None:
            yield o


def read_trace(text: str) -> list[Observation]:
    return list(iter_observations(text.splitlines()))


def write_trace(obs: Iterable[Observation]) -> str:
    return "".join(to_jsonl(o) + "\n" for o in obs)
