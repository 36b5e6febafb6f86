"""Semantic algebras: values, environments, runtime state, facts and conditions."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from decimal import Decimal
from typing import Any, Callable, Iterable, Mapping, Optional, Union

from . import sexpr as sx
from .model import (
    NORMAL, COMPROMISED, And, AttackModel, Dscs, Literal, Member, Not, Or,
    SamModel, SpecialFn, SplitModel,
)

# Values ------------------------------------------------------------------------


@dataclass(frozen=True)
class Text:
    value: str

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Number:
    value: Decimal

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class ObjectRef:
    id: str

    def __str__(self):
        return f"#<{self.id}>"


@dataclass(frozen=True)
class NilValue:
    def __str__(self):
        return "nil"


Nil = NilValue()


@dataclass(frozen=True)
class Tuple:
    items: tuple

    def __str__(self):
        return "(" + " ".join(str(x) for x in self.items) + ")"


@dataclass(frozen=True)
class EventVal:
    name: str


@dataclass(frozen=True)
class ComponentVal:
    name: str


@dataclass(frozen=True)
class SplitVal:
    name: str


@dataclass(frozen=True)
class AttackVal:
    name: str
    attack_types: tuple[tuple[str, Decimal], ...] = ()

    @property
    def priors(self) -> tuple[Decimal, ...]:
        return tuple(p for _, p in self.attack_types)


Value = Union[Text, Number, ObjectRef, NilValue, Tuple, EventVal, ComponentVal, SplitVal, AttackVal]


def equals(a: Value, b: Value) -> bool:
    """Structural equality; total over all values."""
    return a == b


def member_of(member: str, v: Value) -> Value:
    """Value standing for ``(member ?v)``, e.g. the ``events`` map of a model."""
    return Tuple((Text(member), v))


# Environment -------------------------------------------------------------------


class UnboundIdentifier(KeyError):
    pass


@dataclass(frozen=True)
class Env:
    """Context (identifier -> location, value) plus a monotone location counter."""
    context: Mapping[str, tuple[int, Any]] = field(default_factory=dict)
    space: int = 0

    def lookup(self, ident: str):
        try:
            return self.context[ident][1]
        except KeyError:
            raise UnboundIdentifier(ident) from None

    def location(self, ident: str) -> int:
        try:
            return self.context[ident][0]
        except KeyError:
            raise UnboundIdentifier(ident) from None

    def __contains__(self, ident):
        return ident in self.context


EMPTY_ENV = Env()


def take(e: Env, n: int = 1) -> tuple[tuple[int, ...], Env]:
    """``n`` fresh, pairwise distinct locations and the advanced environment."""
    locs = tuple(range(e.space, e.space + n))
    return locs, replace(e, space=e.space + n)


def env_push(e: Env, ident: str, v) -> Env:
    (loc,), e2 = take(e, 1)
    return replace(e2, context={**e2.context, ident: (loc, v)})


def build_environment(m: SamModel, e: Env = EMPTY_ENV) -> Env:
    """Push every named declaration of ``m`` as a semantic value."""
    for kind, name in m.declaration_order:
        if kind == "event":
            e = env_push(e, name, EventVal(name))
        elif kind == "ensemble":
            e = env_push(e, name, ComponentVal(name))
        elif kind == "split":
            e = env_push(e, name, SplitVal(name))
        elif kind == "attack-model":
            am: AttackModel = m.attack_models[name]
            e = env_push(e, name, AttackVal(name, am.attack_types))
    return e


# Runtime state -----------------------------------------------------------------

READY = "ready"
RUNNING = "running"
COMPLETED = "completed"
FLAGS = (READY, RUNNING, COMPLETED)
MODES = (NORMAL, COMPROMISED)


class BottomStateError(Exception):
    pass


@dataclass(frozen=True)
class RtState:
    store: Mapping[Any, Value] = field(default_factory=dict)
    flag: str = READY
    mode: str = NORMAL

    def read(self, loc):
        return self.store[loc]


@dataclass(frozen=True)
class _Bottom:
    def __repr__(self):
        return "Bottom"


Bottom = _Bottom()


def set_flag(s, flag: str):
    if s is Bottom:
        return s
    if flag not in FLAGS:
        raise ValueError(f"not a flag: {flag}")
    return replace(s, flag=flag)


def set_mode(s, mode: str):
    if s is Bottom:
        return s
    if mode not in MODES:
        raise ValueError(f"not a mode: {mode}")
    return replace(s, mode=mode)


def eq_flag(s, flag: str) -> bool:
    return s is not Bottom and s.flag == flag


def eq_mode(s, mode: str) -> bool:
    return s is not Bottom and s.mode == mode


def state_update(s, loc, v: Value) -> RtState:
    if s is Bottom:
        raise BottomStateError("update on the bottom state")
    return replace(s, store={**s.store, loc: v})


# Facts -------------------------------------------------------------------------

Fact = tuple  # (predicate name, Value, ...)


class FactStore:
    """Live fact set plus immutable, labelled snapshots."""

    def __init__(self, facts: Iterable[Fact] = ()):
        self.live: set = set(facts)
        self.snapshots: dict[str, frozenset] = {}

    def assert_fact(self, fact: Fact) -> None:
        self.live.add(tuple(fact))

    def retract_fact(self, fact: Fact) -> None:
        self.live.discard(tuple(fact))

    def snapshot(self, label: str) -> frozenset:
        snap = frozenset(self.live)
        self.snapshots[label] = snap
        return snap

    def get_snapshot(self, label: str) -> frozenset:
        try:
            return self.snapshots[label]
        except KeyError:
            raise UnknownSnapshot(label) from None

    def __contains__(self, fact):
        return tuple(fact) in self.live


def dscs_fact(obj: Value, ds_type: str, mode: str = "good") -> Fact:
    return ("dscs", obj, Text(ds_type), Text(mode))


def map_entry_fact(container: Value, key: Value, value: Value) -> Fact:
    return ("map-entry", container, key, value)


# Predicate registry ----------------------------------------------------------


class ConditionError(Exception):
    pass


class UnboundVariable(ConditionError):
    pass


class UnknownPredicate(ConditionError):
    pass


class UnknownSnapshot(ConditionError):
    pass


class NoBranchTaken(ConditionError):
    pass


class AmbiguousSplit(ConditionError):
    pass


# A predicate sees its evaluated arguments, the live facts and the situation
# facts (the ?before snapshot when one applies, else None).
Predicate = Callable[[tuple, frozenset, Optional[frozenset]], bool]


def _dscs_pred(args, live, before):
    facts = before if before is not None else live
    if len(args) == 2:
        return any(f[:3] == ("dscs", args[0], args[1]) for f in facts)
    return ("dscs", *args) in facts


def _add_to_map_pred(args, live, before):
    if len(args) != 3:
        raise ConditionError("add-to-map takes a map, a key and a value")
    fact = map_entry_fact(*args)
    return fact in live and (before is None or fact not in before)


def _equal_pred(args, live, before):
    return len(args) >= 2 and all(a == args[0] for a in args[1:])


def _not_pred(args, live, before):
    if len(args) != 1:
        raise ConditionError("not takes one argument")
    return not _truthy(args[0])


def _truthy(v) -> bool:
    if isinstance(v, bool):
        return v
    return v is not Nil


def fact_predicate(name: str) -> Predicate:
    """Predicate that holds iff ``(name, *args)`` is a known fact."""
    def pred(args, live, before):
        facts = before if before is not None else live
        return (name, *args) in facts
    pred.__name__ = f"fact:{name}"
    return pred


BUILTINS = ("dscs", "add-to-map", "equal", "not")


class PredicateRegistry:
    def __init__(self, table: Mapping[str, Predicate] | None = None):
        self._table: dict[str, Predicate] = dict(table or {})

    @classmethod
    def with_builtins(cls) -> "PredicateRegistry":
        return cls({"dscs": _dscs_pred, "add-to-map": _add_to_map_pred,
                    "equal": _equal_pred, "not": _not_pred})

    def register(self, name: str, fn: Predicate) -> None:
        self._table[name] = fn

    def lookup(self, name: str) -> Predicate:
        try:
            return self._table[name]
        except KeyError:
            raise UnknownPredicate(name) from None

    def __contains__(self, name):
        return name in self._table

    def names(self):
        return sorted(self._table)


def _split_fn_names(e) -> set[str]:
    out = set()
    if isinstance(e, sx.List) and e.items:
        head = sx.sym_name(e[0])
        if head:
            out.add(head)
        for x in e.items[1:]:
            out |= _split_fn_names(x)
    return out


def _condition_fn_names(c) -> set[str]:
    if isinstance(c, SpecialFn):
        return {c.fn}
    if isinstance(c, Not):
        return _condition_fn_names(c.inner)
    if isinstance(c, (And, Or)):
        return set().union(*(_condition_fn_names(x) for x in c.items))
    return set()


def model_predicate_names(m: SamModel) -> set[str]:
    names = set()
    for b in m.behaviors.values():
        for c in (*b.prerequisites, *b.postconditions):
            names |= _condition_fn_names(c)
    for sm in m.splits.values():
        for _, cond in sm.branches:
            names |= _split_fn_names(cond)
    return names


def registry_for_model(m: SamModel) -> PredicateRegistry:
    """Built-ins plus a fact-backed predicate for every other function in ``m``."""
    reg = PredicateRegistry.with_builtins()
    for name in sorted(model_predicate_names(m) - set(BUILTINS) - {"and", "or"}):
        reg.register(name, fact_predicate(name))
    return reg


# Condition evaluation ----------------------------------------------------------


def _param_value(p, bindings: Mapping[str, Value]) -> Value:
    if isinstance(p, Member):
        return member_of(p.member, _lookup(p.var, bindings))
    if isinstance(p, Literal):
        return Text(p.value)
    return _lookup(p, bindings)


def _lookup(var: str, bindings):
    try:
        return bindings[var]
    except KeyError:
        raise UnboundVariable(var) from None


def eval_condition(c, bindings: Mapping[str, Value], facts: FactStore,
                   situation_base: Optional[str] = None,
                   registry: Optional[PredicateRegistry] = None) -> bool:
    """Evaluate a behavioral condition.

    ``situation_base`` labels the snapshot that ``?before-X`` markers read;
    when omitted the snapshot labelled ``X`` is used.
    """
    reg = registry if registry is not None else _DEFAULT_REGISTRY
    return _eval(c, bindings, facts, situation_base, reg)


def _eval(c, bindings, facts, base, reg) -> bool:
    if isinstance(c, Dscs):
        obj = _lookup(c.object, bindings)
        if c.mode is None:
            return any(f[:3] == ("dscs", obj, Text(c.ds_type)) for f in facts.live)
        return dscs_fact(obj, c.ds_type, c.mode) in facts.live
    if isinstance(c, Not):
        return not _eval(c.inner, bindings, facts, base, reg)
    if isinstance(c, And):
        return all(_eval(x, bindings, facts, base, reg) for x in c.items)
    if isinstance(c, Or):
        return any(_eval(x, bindings, facts, base, reg) for x in c.items)
    if isinstance(c, SpecialFn):
        pred = reg.lookup(c.fn)
        args = tuple(_param_value(p, bindings) for p in c.params)
        before = None
        if c.situation is not None and c.situation[0] == "before":
            before = facts.get_snapshot(base if base is not None else c.situation[1])
        return bool(pred(args, frozenset(facts.live), before))
    raise TypeError(f"not a condition: {c!r}")


def conditions_hold(conds, bindings, facts, situation_base=None, registry=None) -> bool:
    """Conjunction of a condition list; the empty list holds vacuously."""
    return all(eval_condition(c, bindings, facts, situation_base, registry) for c in conds)


# Split evaluation --------------------------------------------------------------


def literal_value(e) -> Value:
    if isinstance(e, sx.Quoted):
        inner = e.inner
        if isinstance(inner, sx.List):
            return Tuple(tuple(literal_value(x) for x in inner))
        return literal_value(inner)
    if isinstance(e, sx.Symbol):
        return Nil if e.name == "nil" else Text(e.name)
    if isinstance(e, sx.Str):
        return Text(e.value)
    if isinstance(e, sx.Num):
        return Number(e.value)
    if isinstance(e, sx.Keyword):
        return Text(":" + e.name)
    raise ConditionError(f"not a literal: {sx.to_text(e)}")


def _eval_expr(e, bindings, facts: Optional[FactStore], reg: PredicateRegistry):
    if isinstance(e, sx.Var):
        return _lookup(e.name, bindings)
    if isinstance(e, sx.List):
        if not e.items:
            return Nil
        head = sx.sym_name(e[0])
        if head is None:
            raise ConditionError(f"cannot call {sx.to_text(e[0])}")
        args = [_eval_expr(x, bindings, facts, reg) for x in e.items[1:]]
        if head == "and":
            return all(_truthy(a) for a in args)
        if head == "or":
            return any(_truthy(a) for a in args)
        live = frozenset(facts.live) if facts is not None else frozenset()
        return bool(reg.lookup(head)(tuple(args), live, None))
    return literal_value(e)


def split_branches_true(sm: SplitModel, args, registry=None, facts=None) -> list[str]:
    if len(args) != len(sm.params):
        raise ConditionError(f"split {sm.name} takes {len(sm.params)} arguments, got {len(args)}")
    reg = registry if registry is not None else _DEFAULT_REGISTRY
    bindings = dict(zip(sm.params, args))
    return [name for name, cond in sm.branches
            if _truthy(_eval_expr(cond, bindings, facts, reg))]


def eval_split(sm: SplitModel, args, registry: Optional[PredicateRegistry] = None,
               facts: Optional[FactStore] = None) -> str:
    """Name of the unique branch whose condition holds for ``args``."""
    taken = split_branches_true(sm, args, registry, facts)
    if not taken:
        raise NoBranchTaken(f"split {sm.name}: no branch holds")
    if len(taken) > 1:
        raise AmbiguousSplit(f"split {sm.name}: branches {', '.join(taken)} all hold")
    return taken[0]


_DEFAULT_REGISTRY = PredicateRegistry.with_builtins()
