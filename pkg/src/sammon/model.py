"""Resolved SAM model: the data the loader produces and everything else reads."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from typing import Optional, Union

from .sexpr import Pos, SExpr

NORMAL = "normal"
COMPROMISED = "compromised"
HACKED = "hacked"
COMPONENT_MODES = (NORMAL, COMPROMISED)
RESOURCE_MODES = (NORMAL, HACKED)

AUTO = "auto"


def _loc():
    return field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class RegisteredEvent:
    name: str
    java_class: str
    java_method: str
    params: tuple[tuple[str, str], ...] = ()
    is_static_on: Optional[str] = None
    output_type: Optional[tuple[str, str]] = None
    bypass: Optional[str] = None
    extra_event_args: tuple[tuple[str, str], ...] = ()
    pos: Optional[Pos] = _loc()


@dataclass(frozen=True)
class EventRef:
    """Reference to an event inside an ensemble or behavior model.

    ``tag_filter`` None matches both entry and exit occurrences.  In
    ``param_pattern`` a None slot is a wildcard (written ``nil``).
    """
    name: str
    tag_filter: Optional[str] = None
    param_pattern: Optional[tuple[Optional[str], ...]] = None
    pos: Optional[Pos] = _loc()


@dataclass(frozen=True)
class ComponentDecl:
    name: str
    type: str
    declared_modes: tuple[str, ...] = (NORMAL,)
    pos: Optional[Pos] = _loc()


@dataclass(frozen=True)
class ControlPoint:
    position: str  # "before" | "after"
    endpoint: str


@dataclass(frozen=True)
class ControlEdge:
    """``source`` event enables ``target``.

    ``after X`` fires when X completes (or a split/join branch is taken),
    ``before X`` fires when X starts.
    """
    source: ControlPoint
    target: ControlPoint


@dataclass(frozen=True)
class SplitDecl:
    name: str
    split_model: str
    params: tuple[str, ...]
    branches: tuple[str, ...]
    pos: Optional[Pos] = _loc()


@dataclass(frozen=True)
class JoinDecl:
    name: str
    ports: tuple[str, ...]
    branches: tuple[str, ...]
    pos: Optional[Pos] = _loc()


@dataclass(frozen=True)
class DataFlow:
    hops: tuple[tuple[str, str], ...]  # (port, node) pairs; first is the source
    pos: Optional[Pos] = _loc()

    @property
    def source(self) -> tuple[str, str]:
        return self.hops[0]

    @property
    def destinations(self) -> tuple[tuple[str, str], ...]:
        return self.hops[1:]


@dataclass(frozen=True)
class ResourceDecl:
    name: str
    res_type: str
    mode_priors: tuple[tuple[str, Decimal], ...]
    pos: Optional[Pos] = _loc()

    def prior(self, mode: str) -> Decimal:
        return dict(self.mode_priors).get(mode, Decimal(0))


@dataclass(frozen=True)
class ModelMapping:
    component: str
    component_mode: str
    resource_context: tuple[tuple[str, str], ...]
    probability: Decimal
    pos: Optional[Pos] = _loc()


@dataclass(frozen=True)
class Ensemble:
    name: str
    entry_events: Union[str, tuple[EventRef, ...]] = ()
    exit_events: tuple[EventRef, ...] = ()
    allowable_events: tuple[EventRef, ...] = ()
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    components: tuple[ComponentDecl, ...] = ()
    controlflows: tuple[ControlPoint, ...] = ()
    splits: tuple[SplitDecl, ...] = ()
    joins: tuple[JoinDecl, ...] = ()
    dataflows: tuple[DataFlow, ...] = ()
    resources: tuple[ResourceDecl, ...] = ()
    resource_mappings: tuple[tuple[str, str], ...] = ()
    model_mappings: tuple[ModelMapping, ...] = ()
    vulnerabilities: tuple[tuple[str, str], ...] = ()
    pos: Optional[Pos] = _loc()

    @property
    def is_auto(self) -> bool:
        return self.entry_events == AUTO

    @property
    def entry_refs(self) -> tuple[EventRef, ...]:
        return () if self.is_auto else self.entry_events

    @property
    def control_edges(self) -> tuple[ControlEdge, ...]:
        pts = self.controlflows
        return tuple(ControlEdge(pts[i], pts[i + 1]) for i in range(0, len(pts) - 1, 2))

    def component(self, name: str) -> Optional[ComponentDecl]:
        for c in self.components:
            if c.name == name:
                return c
        return None

    def split(self, name: str) -> Optional[SplitDecl]:
        for s in self.splits:
            if s.name == name:
                return s
        return None

    def join(self, name: str) -> Optional[JoinDecl]:
        for j in self.joins:
            if j.name == name:
                return j
        return None

    def resource(self, name: str) -> Optional[ResourceDecl]:
        for r in self.resources:
            if r.name == name:
                return r
        return None


# Conditions over facts -------------------------------------------------------

@dataclass(frozen=True)
class Dscs:
    object: str  # variable name, without '?'
    ds_type: str
    mode: Optional[str] = None


@dataclass(frozen=True)
class Not:
    inner: "Condition"


@dataclass(frozen=True)
class And:
    items: tuple["Condition", ...]


@dataclass(frozen=True)
class Or:
    items: tuple["Condition", ...]


@dataclass(frozen=True)
class Member:
    """``(events ?the-model)``: the ``events`` member of a bound object."""
    member: str
    var: str


@dataclass(frozen=True)
class Literal:
    value: str


Param = Union[str, Member, Literal]  # plain str is a variable name


@dataclass(frozen=True)
class SpecialFn:
    fn: str
    params: tuple[Param, ...]
    situation: Optional[tuple[str, str]] = None  # ("before"|"after", component)


Condition = Union[Dscs, Not, And, Or, SpecialFn]


@dataclass(frozen=True)
class BehaviorModel:
    component: str
    mode: str
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    allowable_events: tuple[EventRef, ...] = ()
    prerequisites: tuple[Condition, ...] = ()
    postconditions: tuple[Condition, ...] = ()
    pos: Optional[Pos] = _loc()


@dataclass(frozen=True)
class SplitModel:
    name: str
    params: tuple[str, ...]
    branches: tuple[tuple[str, SExpr], ...]
    pos: Optional[Pos] = _loc()

    @property
    def branch_names(self) -> tuple[str, ...]:
        return tuple(b for b, _ in self.branches)


@dataclass(frozen=True)
class AttackModel:
    name: str
    attack_types: tuple[tuple[str, Decimal], ...]
    vulnerability_mapping: tuple[tuple[str, str], ...]
    pos: Optional[Pos] = _loc()


@dataclass(frozen=True)
class RuleConsequence:
    attack: str
    resource_var: str
    resource_mode: str
    probability: Decimal


@dataclass(frozen=True)
class AttackRule:
    name: str
    direction: str
    resource_var: Optional[str]
    resource_type: Optional[str]
    attack: Optional[str]
    consequences: tuple[RuleConsequence, ...]
    pos: Optional[Pos] = _loc()


@dataclass(frozen=True, eq=False)
class SamModel:
    """A fully loaded model.  Treat as immutable once built."""
    registered_events: dict = field(default_factory=dict)
    ensembles: dict = field(default_factory=dict)
    behaviors: dict = field(default_factory=dict)  # (component, mode) -> BehaviorModel
    splits: dict = field(default_factory=dict)
    attack_models: dict = field(default_factory=dict)
    attack_rules: tuple = ()
    declaration_order: tuple = ()

    def __eq__(self, other):
        if not isinstance(other, SamModel):
            return NotImplemented
        return (self.registered_events == other.registered_events
                and self.ensembles == other.ensembles
                and self.behaviors == other.behaviors
                and self.splits == other.splits
                and self.attack_models == other.attack_models
                and {r.name: r for r in self.attack_rules}
                == {r.name: r for r in other.attack_rules})

    __hash__ = None

    def top_candidates(self) -> list[str]:
        referenced = {c.type for e in self.ensembles.values() for c in e.components}
        return [n for n, e in self.ensembles.items() if e.is_auto and n not in referenced]

    @property
    def top_component(self) -> Optional[str]:
        tops = self.top_candidates()
        return tops[0] if len(tops) == 1 else None

    def behavior(self, component: str, mode: str = NORMAL) -> Optional[BehaviorModel]:
        return self.behaviors.get((component, mode))

    def resources(self) -> dict[str, ResourceDecl]:
        """All resources by name; the first declaration of a name wins."""
        out: dict[str, ResourceDecl] = {}
        for e in self.ensembles.values():
            for r in e.resources:
                out.setdefault(r.name, r)
        return out

    def attack_priors(self) -> dict[str, Decimal]:
        out: dict[str, Decimal] = {}
        for am in self.attack_models.values():
            for name, p in am.attack_types:
                out.setdefault(name, p)
        return out
