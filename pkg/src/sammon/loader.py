"""Elaborate s-expression forms into a :class:`SamModel`.

Loading is a left fold over top-level forms: each declaration extends the
model built so far, the empty sequence leaves it unchanged.
"""

from __future__ import annotations

from dataclasses import replace
from decimal import Decimal
from functools import reduce
from pathlib import Path
from typing import Iterable, Sequence

from . import sexpr as sx
from .model import (
    AUTO, COMPONENT_MODES, COMPROMISED, HACKED, NORMAL, RESOURCE_MODES,
    And, AttackModel, AttackRule, BehaviorModel, ComponentDecl, ControlPoint,
    DataFlow, Dscs, Ensemble, EventRef, JoinDecl, Literal, Member, ModelMapping,
    Not, Or, RegisteredEvent, ResourceDecl, RuleConsequence, SamModel,
    SpecialFn, SplitDecl, SplitModel,
)


class LoadError(Exception):
    def __init__(self, message: str, pos: sx.Pos | None = None):
        where = f"{pos}: " if pos else ""
        super().__init__(where + message)
        self.pos = pos


class UnknownTopForm(LoadError):
    pass


class DuplicateDefinition(LoadError):
    pass


class MalformedClause(LoadError):
    def __init__(self, form, expected: str):
        super().__init__(f"malformed {sx.to_text(form)[:60]!r}: expected {expected}",
                         sx.pos_of(form))
        self.form = form
        self.expected = expected


def _name(e, what="a name") -> str:
    if isinstance(e, sx.Symbol):
        return e.name
    if isinstance(e, sx.Str):
        return e.value
    if isinstance(e, sx.Quoted):
        return _name(e.inner, what)
    raise MalformedClause(e, what)


def _names(e, what="a list of names") -> tuple[str, ...]:
    if not isinstance(e, sx.List):
        raise MalformedClause(e, what)
    return tuple(_name(x) for x in e)


def _prob(e) -> Decimal:
    if not isinstance(e, sx.Num):
        raise MalformedClause(e, "a probability")
    v = e.value
    if not 0 <= v <= 1:
        raise MalformedClause(e, "a probability in [0, 1]")
    return v


def _clauses(form: sx.List, start: int, allowed: dict[str, str]) -> dict[str, sx.SExpr]:
    """Parse ``:key value`` pairs; ``allowed`` maps accepted spellings to canonical keys."""
    out: dict[str, sx.SExpr] = {}
    items = form.items[start:]
    if len(items) % 2:
        raise MalformedClause(form, "keyword/value pairs")
    for k, v in zip(items[::2], items[1::2]):
        if not isinstance(k, sx.Keyword) or k.name not in allowed:
            raise MalformedClause(k, "one of " + ", ".join(":" + a for a in allowed))
        key = allowed[k.name]
        if key in out:
            raise MalformedClause(k, f"a single :{k.name} clause")
        out[key] = v
    return out


# events -----------------------------------------------------------------------

def event_ref(e) -> EventRef:
    if isinstance(e, sx.Symbol):
        return EventRef(e.name, pos=e.pos)
    if isinstance(e, sx.List) and e.items:
        name = _name(e[0], "an event name")
        tag = None
        pattern = None
        rest = list(e.items[1:])
        if rest and isinstance(rest[0], sx.Symbol) and rest[0].name in ("entry", "exit"):
            tag = rest.pop(0).name
        if rest:
            if len(rest) != 1 or not isinstance(rest[0], sx.List):
                raise MalformedClause(e, "(event [entry|exit] (params))")
            pattern = tuple(None if _name(p) == "nil" else _name(p) for p in rest[0])
        return EventRef(name, tag, pattern, pos=e.pos)
    raise MalformedClause(e, "an event reference")


def _event_refs(e) -> tuple[EventRef, ...]:
    if not isinstance(e, sx.List):
        raise MalformedClause(e, "a list of events")
    return tuple(event_ref(x) for x in e)


def load_register_event(form: sx.List) -> RegisteredEvent:
    items = form.items
    if len(items) < 5:
        raise MalformedClause(form, "register-event 'name class method '(params)")
    name = _name(items[1], "an event name")
    cls = _name(items[2], "a class name")
    method = _name(items[3], "a method name")
    plist = items[4].inner if isinstance(items[4], sx.Quoted) else items[4]
    if not isinstance(plist, sx.List):
        raise MalformedClause(items[4], "a parameter list")
    params = []
    for p in plist:
        if not isinstance(p, sx.List) or len(p) != 2:
            raise MalformedClause(p, "(type name)")
        params.append((_name(p[0]), _name(p[1])))
    static = output = bypass = None
    extra = []
    rest = items[5:]
    if len(rest) % 2:
        raise MalformedClause(form, "keyword/value pairs after the parameter list")
    for k, v in zip(rest[::2], rest[1::2]):
        if not isinstance(k, sx.Keyword):
            raise MalformedClause(k, "a keyword")
        if k.name == "static":
            static = _name(v)
        elif k.name == "output-type":
            if not isinstance(v, sx.List) or len(v) != 2:
                raise MalformedClause(v, "(type name)")
            output = (_name(v[0]), _name(v[1]))
        elif k.name == "bypass":
            bypass = _name(v)
        else:
            extra.append((k.name, _name(v)))
    return RegisteredEvent(name, cls, method, tuple(params), static, output, bypass,
                           tuple(extra), pos=form.pos)


# ensembles --------------------------------------------------------------------

_ENSEMBLE_CLAUSES = {
    "entry-events": "entry-events", "exit-events": "exit-events",
    "allowable-events": "allowable-events", "inputs": "inputs", "outputs": "outputs",
    "components": "components", "controlflows": "controlflows", "splits": "splits",
    "joins": "joins", "dataflows": "dataflows", "resources": "resources",
    "resource-mapping": "resource-mappings", "resource-mappings": "resource-mappings",
    "model-mappings": "model-mappings", "vulnerabilities": "vulnerabilities",
}


def _component(e) -> ComponentDecl:
    if not isinstance(e, sx.List) or len(e) < 3:
        raise MalformedClause(e, "(name :type type [:models (normal [compromised])])")
    name = _name(e[0])
    opts = _clauses(e, 1, {"type": "type", "models": "models"})
    if "type" not in opts:
        raise MalformedClause(e, "a :type clause")
    modes = _names(opts["models"]) if "models" in opts else (NORMAL,)
    if NORMAL not in modes or not set(modes) <= set(COMPONENT_MODES):
        raise MalformedClause(opts.get("models", e), "modes drawn from (normal compromised), including normal")
    return ComponentDecl(name, _name(opts["type"]), modes, pos=e.pos)


def _controlflows(e) -> tuple[ControlPoint, ...]:
    if not isinstance(e, sx.List):
        raise MalformedClause(e, "a list of control flows")
    points = []
    for cf in e:
        if not isinstance(cf, sx.List) or len(cf) not in (2, 4):
            raise MalformedClause(cf, "(before|after name [before|after name])")
        for pos_e, end_e in zip(cf.items[::2], cf.items[1::2]):
            where = _name(pos_e)
            if where not in ("before", "after"):
                raise MalformedClause(pos_e, "before or after")
            points.append(ControlPoint(where, _name(end_e)))
    if len(points) % 2:
        raise MalformedClause(e, "control points that pair into edges")
    return tuple(points)


def _split_decl(e) -> SplitDecl:
    if not isinstance(e, sx.List) or len(e) not in (3, 4):
        raise MalformedClause(e, "(split split-model [(params)] (branches))")
    params = _names(e[2]) if len(e) == 4 else ()
    return SplitDecl(_name(e[0]), _name(e[1]), params, _names(e[-1]), pos=e.pos)


def _join_decl(e) -> JoinDecl:
    if not isinstance(e, sx.List) or len(e) not in (2, 3):
        raise MalformedClause(e, "(join [(ports)] (branches))")
    ports = _names(e[1]) if len(e) == 3 else ()
    return JoinDecl(_name(e[0]), ports, _names(e[-1]), pos=e.pos)


def _dataflow(e) -> DataFlow:
    if not isinstance(e, sx.List) or len(e) < 4 or len(e) % 2:
        raise MalformedClause(e, "(port node port node ...)")
    names = [_name(x) for x in e]
    return DataFlow(tuple(zip(names[::2], names[1::2])), pos=e.pos)


def _resource(e) -> ResourceDecl:
    if not isinstance(e, sx.List) or len(e) < 2:
        raise MalformedClause(e, "(name type (normal p) (hacked p))")
    priors = []
    for m in e.items[2:]:
        if not isinstance(m, sx.List) or len(m) != 2:
            raise MalformedClause(m, "(normal|hacked probability)")
        mode = _resource_mode(m[0])
        priors.append((mode, _prob(m[1])))
    return ResourceDecl(_name(e[0]), _name(e[1]), tuple(priors), pos=e.pos)


def _resource_mode(e) -> str:
    mode = _name(e)
    if mode == COMPROMISED:
        mode = HACKED
    if mode not in RESOURCE_MODES:
        raise MalformedClause(e, "normal or hacked")
    return mode


def _model_mapping(e) -> ModelMapping:
    # (comp mode ((res rmode) ...) p)  |  (comp mode (res rmode) p)  |  (comp mode res rmode ... p)
    if not isinstance(e, sx.List) or len(e) < 4:
        raise MalformedClause(e, "(component mode resource-context probability)")
    comp = _name(e[0])
    mode = _name(e[1])
    if mode not in COMPONENT_MODES:
        raise MalformedClause(e[1], "normal or compromised")
    middle = e.items[2:-1]
    ctx = []
    if len(middle) == 1 and isinstance(middle[0], sx.List):
        inner = middle[0]
        pairs = inner.items if all(isinstance(x, sx.List) for x in inner) else (inner,)
        for pr in pairs:
            if not isinstance(pr, sx.List) or len(pr) != 2:
                raise MalformedClause(pr, "(resource normal|hacked)")
            ctx.append((_name(pr[0]), _resource_mode(pr[1])))
    else:
        if not middle or len(middle) % 2:
            raise MalformedClause(e, "resource/mode pairs")
        for r, m in zip(middle[::2], middle[1::2]):
            ctx.append((_name(r), _resource_mode(m)))
    return ModelMapping(comp, mode, tuple(ctx), _prob(e[-1]), pos=e.pos)


def _pairs(e, what) -> tuple[tuple[str, str], ...]:
    if not isinstance(e, sx.List):
        raise MalformedClause(e, what)
    out = []
    for p in e:
        if not isinstance(p, sx.List) or len(p) != 2:
            raise MalformedClause(p, what)
        out.append((_name(p[0]), _name(p[1])))
    return tuple(out)


def load_ensemble(form: sx.List) -> Ensemble:
    if len(form) < 2:
        raise MalformedClause(form, "define-ensemble name clauses...")
    name = _name(form[1], "an ensemble name")
    c = _clauses(form, 2, _ENSEMBLE_CLAUSES)
    entry = c.get("entry-events")
    if isinstance(entry, sx.Keyword):
        if entry.name != AUTO:
            raise MalformedClause(entry, ":auto or a list of events")
        entry_events = AUTO
    else:
        entry_events = _event_refs(entry) if entry is not None else ()

    def seq(key, fn):
        v = c.get(key)
        if v is None:
            return ()
        if not isinstance(v, sx.List):
            raise MalformedClause(v, f"a list for :{key}")
        return tuple(fn(x) for x in v)

    return Ensemble(
        name=name,
        entry_events=entry_events,
        exit_events=_event_refs(c["exit-events"]) if "exit-events" in c else (),
        allowable_events=_event_refs(c["allowable-events"]) if "allowable-events" in c else (),
        inputs=_names(c["inputs"]) if "inputs" in c else (),
        outputs=_names(c["outputs"]) if "outputs" in c else (),
        components=seq("components", _component),
        controlflows=_controlflows(c["controlflows"]) if "controlflows" in c else (),
        splits=seq("splits", _split_decl),
        joins=seq("joins", _join_decl),
        dataflows=seq("dataflows", _dataflow),
        resources=seq("resources", _resource),
        resource_mappings=_pairs(c["resource-mappings"], "(component resource)")
        if "resource-mappings" in c else (),
        model_mappings=seq("model-mappings", _model_mapping),
        vulnerabilities=_pairs(c["vulnerabilities"], "(resource vulnerability)")
        if "vulnerabilities" in c else (),
        pos=form.pos,
    )


# behavior models ---------------------------------------------------------------

_BEHAVIOR_CLAUSES = {
    "inputs": "inputs", "outputs": "outputs", "allowable-events": "allowable-events",
    "prerequisites": "prerequisites", "postconditions": "postconditions",
    "post-conditions": "postconditions",
}


def _param(e):
    if isinstance(e, sx.Var):
        return e.name
    if isinstance(e, sx.List) and len(e) == 2 and isinstance(e[1], sx.Var):
        return Member(_name(e[0]), e[1].name)
    if isinstance(e, sx.Quoted):
        return Literal(_name(e.inner))
    if isinstance(e, sx.Symbol):
        return Literal(e.name)
    if isinstance(e, sx.Num):
        return Literal(e.text)
    raise MalformedClause(e, "?var or (member ?var)")


def condition(e):
    """Elaborate one bracketed behavioral condition."""
    if not isinstance(e, sx.Bracket) or not e.items:
        raise MalformedClause(e, "a bracketed condition")
    head = e[0]
    if isinstance(head, sx.Var):
        # empty DSCond: [?obj type [good]]
        return _dscs(e, e.items)
    hname = _name(head, "a condition head")
    args = e.items[1:]
    if hname == "dscs":
        return _dscs(e, args)
    if hname == "not":
        if len(args) != 1:
            raise MalformedClause(e, "[not condition]")
        return Not(condition(args[0]))
    if hname in ("and", "or"):
        items = tuple(condition(a) for a in args)
        return And(items) if hname == "and" else Or(items)
    params = list(args)
    situation = None
    if params and isinstance(params[-1], sx.Var) and params[-1].situation:
        situation = params.pop().situation
    return SpecialFn(hname, tuple(_param(p) for p in params), situation)


def _dscs(e, args):
    if len(args) not in (2, 3) or not isinstance(args[0], sx.Var):
        raise MalformedClause(e, "[dscs ?object type [good]]")
    mode = None
    if len(args) == 3:
        mode = _name(args[2])
        if mode != "good":
            raise MalformedClause(args[2], "good")
    return Dscs(args[0].name, _name(args[1]), mode)


def _conditions(e):
    if not isinstance(e, sx.List):
        raise MalformedClause(e, "a list of conditions")
    return tuple(condition(x) for x in e)


def load_behavior(form: sx.List) -> BehaviorModel:
    if len(form) < 2 or not isinstance(form[1], sx.List) or len(form[1]) != 2:
        raise MalformedClause(form, "defbehavior-model (component normal|compromised) ...")
    comp = _name(form[1][0])
    mode = _name(form[1][1])
    if mode not in COMPONENT_MODES:
        raise MalformedClause(form[1][1], "normal or compromised")
    c = _clauses(form, 2, _BEHAVIOR_CLAUSES)
    return BehaviorModel(
        component=comp,
        mode=mode,
        inputs=_names(c["inputs"]) if "inputs" in c else (),
        outputs=_names(c["outputs"]) if "outputs" in c else (),
        allowable_events=_event_refs(c["allowable-events"]) if "allowable-events" in c else (),
        prerequisites=_conditions(c["prerequisites"]) if "prerequisites" in c else (),
        postconditions=_conditions(c["postconditions"]) if "postconditions" in c else (),
        pos=form.pos,
    )


# splits -----------------------------------------------------------------------

def load_split(form: sx.List) -> SplitModel:
    if len(form) < 3:
        raise MalformedClause(form, "defsplit name (params) (branch (condition))...")
    name = _name(form[1], "a split name")
    params = []
    if not isinstance(form[2], sx.List):
        raise MalformedClause(form[2], "a parameter list")
    for p in form[2]:
        params.append(p.name if isinstance(p, sx.Var) else _name(p))
    branches = []
    for b in form.items[3:]:
        if not isinstance(b, sx.List) or len(b) != 2:
            raise MalformedClause(b, "(branch (condition))")
        bname = _name(b[0])
        if bname in (x for x, _ in branches):
            raise DuplicateDefinition(f"branch {bname} in split {name}", b.pos)
        branches.append((bname, b[1]))
    return SplitModel(name, tuple(params), tuple(branches), pos=form.pos)


# attacks ----------------------------------------------------------------------

def load_attack_model(form: sx.List) -> AttackModel:
    if len(form) < 2:
        raise MalformedClause(form, "define-attack-model name clauses...")
    name = _name(form[1])
    c = _clauses(form, 2, {"attack-types": "attack-types",
                           "vulnerability-mapping": "vulnerability-mapping"})
    types = []
    at = c.get("attack-types", sx.List(()))
    if not isinstance(at, sx.List):
        raise MalformedClause(at, "a list of (attack probability)")
    for t in at:
        if not isinstance(t, sx.List) or len(t) != 2:
            raise MalformedClause(t, "(attack probability)")
        aname = _name(t[0])
        if aname in (a for a, _ in types):
            raise DuplicateDefinition(f"attack type {aname}", t.pos)
        types.append((aname, _prob(t[1])))
    vmap = _pairs(c.get("vulnerability-mapping", sx.List(())), "(vulnerability attack)")
    return AttackModel(name, tuple(types), vmap, pos=form.pos)


def _flatten_and(e):
    if isinstance(e, sx.Bracket) and e.items and sx.sym_name(e[0]) == "and":
        out = []
        for x in e.items[1:]:
            out.extend(_flatten_and(x))
        return out
    return [e]


def load_rule(form: sx.List) -> AttackRule:
    items = form.items
    if len(items) < 3:
        raise MalformedClause(form, "defrule name (:forward) if ... then ...")
    name = _name(items[1])
    rest = list(items[2:])
    direction = "forward"
    if rest and isinstance(rest[0], sx.List):
        opts = rest.pop(0)
        if len(opts) != 1 or not isinstance(opts[0], sx.Keyword):
            raise MalformedClause(opts, "(:forward)")
        direction = opts[0].name
    try:
        i_if = next(i for i, x in enumerate(rest) if sx.sym_name(x) == "if")
        i_then = next(i for i, x in enumerate(rest) if sx.sym_name(x) == "then")
    except StopIteration:
        raise MalformedClause(form, "if ... then ...") from None
    if not i_if < i_then:
        raise MalformedClause(form, "if before then")
    conds = [c for x in rest[i_if + 1:i_then] for c in _flatten_and(x)]
    cons = [c for x in rest[i_then + 1:] for c in _flatten_and(x)]
    res_var = res_type = attack = None
    for c in conds:
        if not isinstance(c, sx.Bracket) or not c.items:
            raise MalformedClause(c, "a bracketed rule condition")
        head = sx.sym_name(c[0])
        if head == "resource" and len(c) == 4 and isinstance(c[3], sx.Var):
            res_var = c[3].name
        elif head == "resource-type-of" and len(c) == 3:
            res_type = _name(c[2])
        elif head == "resource-might-have-been-attacked" and len(c) == 3:
            attack = _name(c[2])
        else:
            raise MalformedClause(c, "resource / resource-type-of / resource-might-have-been-attacked")
    consequences = []
    for c in cons:
        if (not isinstance(c, sx.Bracket) or len(c) != 5
                or sx.sym_name(c[0]) != "attack-implies-compromised-mode"
                or not isinstance(c[2], sx.Var)):
            raise MalformedClause(c, "[attack-implies-compromised-mode attack ?res mode p]")
        var = c[2].name
        if res_var is not None and var != res_var:
            raise MalformedClause(c, f"the rule's resource variable ?{res_var}")
        consequences.append(RuleConsequence(_name(c[1]), var, _resource_mode(c[3]), _prob(c[4])))
    return AttackRule(name, direction, res_var, res_type, attack, tuple(consequences),
                      pos=form.pos)


# folding ----------------------------------------------------------------------

_TOP_FORMS = ("register-event", "define-ensemble", "defbehavior-model", "defsplit",
              "define-attack-model", "defrule")


def extend_model(m: SamModel, form: sx.SExpr) -> SamModel:
    """Return ``m`` extended with one top-level declaration."""
    if not isinstance(form, sx.List) or not form.items:
        raise UnknownTopForm(f"expected a top-level form, got {sx.to_text(form)[:40]!r}",
                             sx.pos_of(form))
    head = sx.sym_name(form[0])
    if head not in _TOP_FORMS:
        raise UnknownTopForm(f"unknown top-level form {sx.to_text(form[0])!r}", form.pos)
    order = m.declaration_order
    if head == "register-event":
        ev = load_register_event(form)
        _fresh(m.registered_events, ev.name, "event", form)
        return replace(m, registered_events={**m.registered_events, ev.name: ev},
                       declaration_order=order + (("event", ev.name),))
    if head == "define-ensemble":
        ens = load_ensemble(form)
        _fresh(m.ensembles, ens.name, "ensemble", form)
        return replace(m, ensembles={**m.ensembles, ens.name: ens},
                       declaration_order=order + (("ensemble", ens.name),))
    if head == "defbehavior-model":
        b = load_behavior(form)
        key = (b.component, b.mode)
        _fresh(m.behaviors, key, "behavior model", form)
        return replace(m, behaviors={**m.behaviors, key: b},
                       declaration_order=order + (("behavior", key),))
    if head == "defsplit":
        s = load_split(form)
        _fresh(m.splits, s.name, "split model", form)
        return replace(m, splits={**m.splits, s.name: s},
                       declaration_order=order + (("split", s.name),))
    if head == "define-attack-model":
        a = load_attack_model(form)
        _fresh(m.attack_models, a.name, "attack model", form)
        taken = {n for am in m.attack_models.values() for n, _ in am.attack_types}
        for n, _ in a.attack_types:
            if n in taken:
                raise DuplicateDefinition(f"attack type {n}", form.pos)
        return replace(m, attack_models={**m.attack_models, a.name: a},
                       declaration_order=order + (("attack-model", a.name),))
    r = load_rule(form)
    if any(x.name == r.name for x in m.attack_rules):
        raise DuplicateDefinition(f"rule {r.name}", form.pos)
    return replace(m, attack_rules=m.attack_rules + (r,),
                   declaration_order=order + (("rule", r.name),))


def _fresh(table, key, what, form):
    if key in table:
        raise DuplicateDefinition(f"{what} {key} defined twice", form.pos)


def load_model(forms: Iterable[sx.SExpr], base: SamModel | None = None) -> SamModel:
    return reduce(extend_model, forms, base if base is not None else SamModel())


def load_text(text: str) -> SamModel:
    return load_model(sx.read_all(text))


def load_files(paths: Sequence[str | Path]) -> SamModel:
    """Concatenate model files in order and load them."""
    text = "\n".join(Path(p).read_text(encoding="utf-8") for p in paths)
    return load_text(text)


def bundled_example() -> str:
    """Source text of the bundled MAF editor example model."""
    return (Path(__file__).parent / "data" / "maf.sam").read_text(encoding="utf-8")
