"""Simulate a model to produce observation streams, with optional fault injection.

The simulator runs one leaf component at a time: entry, a few allowable
events, exit.  Split outcomes come from the scenario script.  Argument
values are symbolic tokens, and the facts that make normal-behavior
conditions true are attached to the observations that need them.
"""

from __future__ import annotations

import itertools
import json
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .check import node_names
from .model import NORMAL, And, ControlPoint, Dscs, Ensemble, Not, Or, SamModel, SpecialFn
from .semantics import (
    ConditionError, FactStore, Nil, ObjectRef, Text, dscs_fact, literal_value, map_entry_fact,
    member_of, registry_for_model, split_branches_true,
)
from . import sexpr as sx
from .trace import ENTRY, EXIT, FactOp, Observation

FAULT_KINDS = ("drop-exit", "inject-unexpected", "violate-postcondition", "swap-order", "corrupt-arg")
ROGUE_EVENT = "rogue-event"
PID = 4242


class ScenarioIncomplete(Exception):
    pass


class LoopBoundExceeded(Exception):
    pass


class GenerationError(Exception):
    pass


class FaultNotApplicable(ValueError):
    pass


@dataclass(frozen=True)
class SplitChoice:
    at: str
    branch: Optional[str] = None
    value: Optional[str] = None


@dataclass(frozen=True)
class Scenario:
    split_choices: tuple = ()
    loop_bound: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.loop_bound < 0:
            raise ValueError("loop_bound must be >= 0")

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        choices = []
        for s in d.get("splits", []):
            if "at" not in s or ("branch" not in s and "value" not in s):
                raise ValueError("each split choice needs 'at' and a 'branch' or 'value'")
            choices.append(SplitChoice(s["at"].lower(), s.get("branch"), s.get("value")))
        return cls(tuple(choices), int(d.get("loop_bound", 4)), int(d.get("seed", 0)))

    def to_json(self) -> dict:
        splits = []
        for c in self.split_choices:
            d = {"at": c.at}
            if c.branch is not None:
                d["branch"] = c.branch
            if c.value is not None:
                d["value"] = c.value
            splits.append(d)
        return {"splits": splits, "loop_bound": self.loop_bound, "seed": self.seed}


@dataclass(frozen=True)
class Fault:
    kind: str
    injection_index: int

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Fault":
        kind, sep, idx = text.rpartition(":")
        if not sep or not idx.isdigit():
            raise ValueError(f"fault must look like kind:index, got {text!r}")
        return cls(kind, int(idx))


@dataclass
class ObsMeta:
    role: str  # entry | allowable | exit | merged
    instance: str
    post_facts: tuple = ()  # facts attached only to satisfy the exiting component's postconditions
    checkable_slots: tuple = ()  # argument positions whose value some check depends on


@dataclass
class GeneratedTrace:
    observations: list
    meta: list

    def __len__(self):
        return len(self.observations)


# simulation ---------------------------------------------------------------------


@dataclass(eq=False)
class _Inst:
    path: str
    ens: Ensemble
    local: str
    parent: Optional["_Inst"]
    order: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    state: str = "ready"
    net: Optional["_Net"] = None

    @property
    def depth(self):
        return self.path.count("/")


@dataclass(eq=False)
class _Net:
    owner: _Inst
    preds: dict
    fired: set = field(default_factory=set)
    buffers: dict = field(default_factory=dict)
    instances: dict = field(default_factory=dict)
    split_taken: dict = field(default_factory=dict)
    join_values: dict = field(default_factory=dict)


class _Sim:
    def __init__(self, m: SamModel, sc: Scenario):
        if m.top_component is None:
            raise GenerationError("model has no unique top component")
        self.m = m
        self.sc = sc
        self.registry = registry_for_model(m)
        self.facts = FactStore()
        self.choices = deque(sc.split_choices)
        self.pending_branch: dict = {}  # (net id, split) -> branch decided at the feeding exit
        self.obs: list[Observation] = []
        self.meta: list[ObsMeta] = []
        self.cur: Optional[list] = None  # facts of the observation being built
        self.agenda: deque = deque()
        self.all: list[_Inst] = []
        self._order = 0
        self.ts = 0
        self.event_names = {r.name for e in m.ensembles.values()
                            for r in (*e.entry_refs, *e.exit_events)}
        top = m.top_component
        self.top = self._new(m.ensembles[top], top, None)
        self._start(self.top)
        self._drain()

    # structure --------------------------------------------------------------------

    def _new(self, ens, local, parent) -> _Inst:
        path = f"{parent.path}/{local}" if parent else local
        self._order += 1
        inst = _Inst(path, ens, local, parent, self._order)
        self.all.append(inst)
        return inst

    def _start(self, inst: _Inst):
        again = 0
        p = inst.parent
        while p is not None:
            if p.ens.name == inst.ens.name:
                again += 1
            p = p.parent
        if again > self.sc.loop_bound:
            raise LoopBoundExceeded(f"{inst.ens.name} re-entered more than {self.sc.loop_bound} times")
        self._ensure(self._conditions(inst, "prerequisites"), inst)
        inst.state = "running"
        if inst.parent is not None:
            self.agenda.append(("fire", inst.parent.net, ControlPoint("before", inst.local)))
        ens = inst.ens
        if not ens.components:
            if not ens.exit_events:
                self._complete(inst)
            return
        preds: dict = {}
        for e in ens.control_edges:
            preds.setdefault(e.target.endpoint, set()).add(e.source)
        inst.net = _Net(inst, preds)
        self.agenda.append(("fire", inst.net, ControlPoint("before", ens.name)))
        for p in ens.inputs:
            self.agenda.append(("emit", inst.net, ens.name, p, inst.inputs[p]))
        for c in ens.components:
            self.agenda.append(("enable", inst.net, c.name))
        self.agenda.append(("complete?", inst))

    def _complete(self, inst: _Inst):
        if not inst.ens.exit_events:
            self._ensure(self._conditions(inst, "postconditions"), inst)
        inst.state = "completed"
        if inst.parent is None:
            return
        net = inst.parent.net
        for p, v in inst.outputs.items():
            self.agenda.append(("emit", net, inst.local, p, v))
        self.agenda.append(("fire", net, ControlPoint("after", inst.local)))
        self.agenda.append(("complete?", inst.parent))

    def _composite_done(self, inst: _Inst) -> bool:
        ens = inst.ens
        if any(c.state == "running" for c in inst.net.instances.values()):
            return False
        fed = {p for df in ens.dataflows for p, n in df.destinations if n == ens.name}
        if fed:
            return all(p in inst.outputs for p in ens.outputs if p in fed)
        return all(inst.net.instances.get(c.name) is not None
                   and inst.net.instances[c.name].state == "completed" for c in ens.components)

    def _drain(self):
        while self.agenda:
            kind, *rest = self.agenda.popleft()
            getattr(self, "_do_" + kind.rstrip("?"))(*rest)

    def _do_complete(self, inst):
        if (inst.state == "running" and inst.ens.components and not inst.ens.exit_events
                and self._composite_done(inst)):
            self._complete(inst)

    def _do_start(self, inst):
        ens = inst.ens
        if (inst.state == "ready" and all(p in inst.inputs for p in ens.inputs)
                and (ens.is_auto or not ens.entry_refs)):
            self._start(inst)

    def _do_emit(self, net, node, port, value):
        if net.owner.state != "running":
            return
        for df in net.owner.ens.dataflows:
            if df.source == (port, node):
                for dport, dnode in df.destinations:
                    self._deliver(net, dnode, dport, value)

    def _deliver(self, net, node, port, value):
        ens = net.owner.ens
        if node == ens.name:
            net.owner.outputs.setdefault(port, value)
            self.agenda.append(("complete?", net.owner))
            return
        comp = ens.component(node)
        if comp is not None:
            inst = net.instances.get(node)
            if inst is not None and inst.state == "ready":
                inst.inputs[port] = value
                self.agenda.append(("start?", inst))
            else:
                net.buffers.setdefault(node, {})[port] = value
            return
        split = ens.split(node)
        if split is not None:
            buf = net.buffers.setdefault(split.name, {})
            buf[port] = value
            ports = split.params or self.m.splits[split.split_model].params
            if split.name not in net.split_taken and all(p in buf for p in ports):
                key = (id(net), split.name)
                if key not in self.pending_branch:
                    raise ScenarioIncomplete(f"split {split.name} reached with no scripted choice")
                branch = self.pending_branch.pop(key)
                net.split_taken[split.name] = branch
                bnode = f"{split.name}-{branch}"
                self.agenda.append(("fire", net, ControlPoint("after", bnode)))
                self.agenda.append(("fire", net, ControlPoint("after", split.name)))
                for p in ports:
                    self.agenda.append(("emit", net, bnode, p, buf[p]))
            return
        join = ens.join(node)
        if join is not None:
            self._join(net, join, None, port, value)
            return
        for j in ens.joins:
            if node.startswith(j.name + "-") and node[len(j.name) + 1:] in j.branches:
                net.buffers.setdefault(node, {}).setdefault(port, value)
                self._flush(net, j, node[len(j.name) + 1:])
                return
        for s in ens.splits:
            if node.startswith(s.name + "-") and net.split_taken.get(s.name) == node[len(s.name) + 1:]:
                self.agenda.append(("emit", net, node, port, value))
                return

    def _flush(self, net, join, branch):
        node = f"{join.name}-{branch}"
        if not net.preds.get(node, set()) <= net.fired:
            return
        for p, v in net.buffers.pop(node, {}).items():
            self._join(net, join, branch, p, v)

    def _join(self, net, join, branch, port, value):
        vals = net.join_values.setdefault(join.name, {})
        if port in vals:
            return
        vals[port] = value
        self.agenda.append(("emit", net, join.name, port, value))
        if branch is not None:
            self.agenda.append(("fire", net, ControlPoint("after", f"{join.name}-{branch}")))
        self.agenda.append(("fire", net, ControlPoint("after", join.name)))

    def _do_fire(self, net, point):
        if net.owner.state != "running" or point in net.fired:
            return
        net.fired.add(point)
        for node, preds in net.preds.items():
            if point in preds and preds <= net.fired:
                self.agenda.append(("enable", net, node))

    def _do_enable(self, net, node):
        if net.owner.state != "running" or not net.preds.get(node, set()) <= net.fired:
            return
        comp = net.owner.ens.component(node)
        if comp is not None:
            if node in net.instances:
                return
            inst = self._new(self.m.ensembles[comp.type], node, net.owner)
            net.instances[node] = inst
            inst.inputs.update(net.buffers.pop(node, {}))
            self.agenda.append(("start?", inst))
            return
        for j in net.owner.ens.joins:
            if node.startswith(j.name + "-") and node[len(j.name) + 1:] in j.branches:
                self._flush(net, j, node[len(j.name) + 1:])

    # facts ---------------------------------------------------------------------------

    def _conditions(self, inst, which):
        b = self.m.behavior(inst.ens.name, NORMAL)
        return getattr(b, which) if b is not None else ()

    def _bindings(self, inst):
        d = dict(inst.inputs)
        d.update(inst.outputs)
        return d

    def _facts_for(self, conds, bindings) -> list:
        out = []
        for c in conds:
            out.extend(self._facts_for_one(c, bindings))
        return out

    def _facts_for_one(self, c, b) -> list:
        if isinstance(c, Dscs):
            return [dscs_fact(b[c.object], c.ds_type, c.mode or "good")] if c.object in b else []
        if isinstance(c, And):
            return self._facts_for(c.items, b)
        if isinstance(c, Or):
            return self._facts_for_one(c.items[0], b) if c.items else []
        if isinstance(c, Not):
            return []
        if isinstance(c, SpecialFn):
            args = []
            for p in c.params:
                if isinstance(p, str):
                    if p not in b:
                        return []
                    args.append(b[p])
                elif hasattr(p, "member"):
                    if p.var not in b:
                        return []
                    args.append(member_of(p.member, b[p.var]))
                else:
                    args.append(Text(p.value))
            if c.fn == "add-to-map" and len(args) == 3:
                return [map_entry_fact(*args)]
            if c.fn == "dscs":
                return [("dscs", *args, Text("good"))] if len(args) == 2 else [("dscs", *args)]
            if c.fn in ("equal", "not"):
                return []
            return [(c.fn, *args)]
        return []

    def _ensure(self, conds, inst) -> list:
        """Attach the facts ``conds`` need that are not yet live; returns them."""
        new = []
        for f in self._facts_for(conds, self._bindings(inst)):
            if f not in self.facts and f not in new:
                new.append(f)
        for f in new:
            self.facts.assert_fact(f)
            if self.cur is not None:
                self.cur.append(f)
        return new

    # emission ------------------------------------------------------------------------

    def _emit_obs(self, name, tag, args, role, inst, post_facts=(), slots=(), facts=()):
        self.ts += 1000
        self.obs.append(Observation(name, tag, tuple(args), PID, self.ts,
                                    tuple(FactOp("assert", f) for f in facts)))
        self.meta.append(ObsMeta(role, inst.path, tuple(post_facts), tuple(slots)))

    def _rng(self, inst):
        return random.Random(f"{self.sc.seed}:{inst.path}")

    def _token(self, port, inst):
        return ObjectRef(f"{port}@{inst.path}#{self.sc.seed}")

    def _ready_leaves(self):
        out = []
        for inst in self.all:
            if inst.state != "ready" or not inst.ens.entry_refs:
                continue
            if not all(p in inst.inputs for p in inst.ens.inputs):
                continue
            if not self._ancestors_running(inst):
                continue
            out.append(inst)
        out.sort(key=lambda i: (-i.depth, i.order))
        return out

    @staticmethod
    def _ancestors_running(inst):
        p = inst.parent
        while p is not None:
            if p.state != "running":
                return False
            p = p.parent
        return True

    def run(self, max_steps: int = 100000) -> GeneratedTrace:
        steps = 0
        while self.top.state != "completed":
            steps += 1
            if steps > max_steps:
                raise GenerationError("simulation does not terminate")
            cands = self._ready_leaves()
            if not cands:
                raise GenerationError("no component can run but the top component has not completed")
            self._run_component(cands[0])
        return GeneratedTrace(self.obs, self.meta)

    def _run_component(self, inst: _Inst):
        ens = inst.ens
        ref = ens.entry_refs[0]
        args = self._pattern_args(ref.param_pattern, inst.inputs, [inst.inputs[p] for p in ens.inputs])
        self.cur = []
        self._start(inst)
        self._drain()
        facts, self.cur = self.cur, None
        self._emit_obs(ref.name, ref.tag_filter or ENTRY, args, "entry", inst, facts=facts)
        if ens.components:
            return  # composites with entry events run their subnetwork next
        self._allowables(inst)
        if ens.exit_events:
            self._exit(inst)

    def _allowables(self, inst):
        refs = list(inst.ens.allowable_events)
        b = self.m.behavior(inst.ens.name, NORMAL)
        if b is not None:
            refs.extend(b.allowable_events)
        seen = set()
        usable = []
        for r in refs:
            if r.name in self.event_names or r.name == ROGUE_EVENT or (r.name, r.tag_filter) in seen:
                continue
            seen.add((r.name, r.tag_filter))
            usable.append(r)
        rng = self._rng(inst)
        for r in usable:
            if rng.random() < 0.5:
                n = len(r.param_pattern) if r.param_pattern is not None else 0
                self._emit_obs(r.name, r.tag_filter or ENTRY, [Nil] * n, "allowable", inst)

    @staticmethod
    def _pattern_args(pattern, values, default):
        if pattern is None:
            return default
        return [values.get(p, Nil) if p is not None else Nil for p in pattern]

    def _split_targets(self, inst, port):
        """Splits in the parent network fed by output ``port`` of ``inst``."""
        if inst.parent is None:
            return []
        ens = inst.parent.ens
        out = []
        for df in ens.dataflows:
            if df.source == (port, inst.local):
                for dport, dnode in df.destinations:
                    s = ens.split(dnode)
                    if s is not None:
                        out.append(s)
        return out

    def _exit(self, inst: _Inst):
        ens = inst.ens
        ref = next((r for r in ens.exit_events if r.tag_filter in (None, EXIT)), ens.exit_events[0])
        self.cur = []
        split_facts = []
        checkable = set()
        for p in ens.outputs:
            targets = self._split_targets(inst, p)
            if targets:
                value, facts = self._drive_split(inst, targets[0], p)
                inst.outputs[p] = value
                split_facts.extend(facts)
                checkable.add(p)
            elif p in inst.inputs:
                inst.outputs[p] = inst.inputs[p]
            else:
                inst.outputs[p] = self._token(p, inst)
        for f in split_facts:
            if f not in self.facts:
                self.facts.assert_fact(f)
                self.cur.append(f)
        post = self._ensure(self._conditions(inst, "postconditions"), inst)
        checkable |= _referenced_vars(self._conditions(inst, "postconditions")) & set(ens.outputs)
        args = self._pattern_args(ref.param_pattern, inst.outputs, [inst.outputs[p] for p in ens.outputs])
        tag = ref.tag_filter or EXIT
        pattern = ref.param_pattern if ref.param_pattern is not None else ens.outputs
        slots = tuple(i for i, p in enumerate(pattern) if p in checkable)
        obs = Observation(ref.name, tag, tuple(args))
        self._complete(inst)
        self._drain()
        # the same observation may be the entry of a waiting component
        merged = None
        for cand in self._ready_leaves():
            if any(r.name == obs.event and r.tag_filter == tag for r in cand.ens.entry_refs):
                merged = cand
                break
        if merged is not None:
            self._start(merged)
            self._drain()
        facts, self.cur = self.cur, None
        self._emit_obs(ref.name, tag, args, "merged" if merged else "exit", inst,
                       post_facts=post, slots=slots, facts=facts)
        if merged is not None:
            self._allowables(merged)
            if merged.ens.exit_events and not merged.ens.components:
                self._exit(merged)

    def _drive_split(self, inst, split, port):
        """Value for ``port`` (plus supporting facts) that takes the scripted branch."""
        if not self.choices:
            raise ScenarioIncomplete(f"split {split.name} reached with no scripted choice")
        choice = self.choices.popleft()
        if choice.at != split.name:
            raise ScenarioIncomplete(f"split {split.name} reached but the script expects {choice.at}")
        sm = self.m.splits[split.split_model]
        net = inst.parent.net
        if choice.value is not None:
            value = Text(choice.value.lower())
            branches = split_branches_true(sm, [value], self.registry, self.facts)
            if len(branches) != 1:
                raise ScenarioIncomplete(f"value {choice.value!r} does not select one branch of {split.name}")
            self.pending_branch[(id(net), split.name)] = branches[0]
            return value, []
        if choice.branch not in split.branches:
            raise ScenarioIncomplete(f"split {split.name} has no branch {choice.branch}")
        token = self._token(port, inst)
        preds = sorted(_split_predicates(sm))
        candidates = [token] + [literal_value(x) for x in _split_literals(sm)]
        for value in candidates:
            for k in range(len(preds) + 1):
                for chosen in itertools.combinations(preds, k):
                    facts = [(fn, value) for fn in chosen]
                    trial = FactStore(self.facts.live | set(facts))
                    try:
                        branches = split_branches_true(sm, [value], self.registry, trial)
                    except ConditionError:
                        continue
                    if branches == [choice.branch]:
                        self.pending_branch[(id(net), split.name)] = choice.branch
                        return value, facts
        raise ScenarioIncomplete(f"cannot find a value taking branch {choice.branch} of {split.name}")


def _referenced_vars(conds) -> set:
    out = set()
    for c in conds:
        if isinstance(c, Dscs):
            out.add(c.object)
        elif isinstance(c, Not):
            out |= _referenced_vars([c.inner])
        elif isinstance(c, (And, Or)):
            out |= _referenced_vars(c.items)
        elif isinstance(c, SpecialFn):
            for p in c.params:
                if isinstance(p, str):
                    out.add(p)
                elif hasattr(p, "var"):
                    out.add(p.var)
    return out


def _split_predicates(sm) -> set:
    """User predicates applied directly to a split parameter."""
    out = set()

    def walk(e):
        if isinstance(e, sx.List) and e.items:
            head = sx.sym_name(e[0])
            if head not in (None, "equal", "not", "and", "or") and any(
                    isinstance(a, sx.Var) for a in e.items[1:]):
                out.add(head)
            for x in e.items[1:]:
                walk(x)
    for _, cond in sm.branches:
        walk(cond)
    return out


def _split_literals(sm) -> list:
    out = []

    def walk(e):
        if isinstance(e, sx.List) and e.items:
            if sx.sym_name(e[0]) == "equal":
                for a in e.items[1:]:
                    if not isinstance(a, (sx.Var, sx.List)) and a not in out:
                        out.append(a)
            for x in e.items[1:]:
                walk(x)
    for _, cond in sm.branches:
        walk(cond)
    return out


def simulate(m: SamModel, sc: Scenario) -> GeneratedTrace:
    return _Sim(m, sc).run()


# faults ----------------------------------------------------------------------------


def applicable_indices(gen: GeneratedTrace, kind: str) -> list[int]:
    n = len(gen)
    obs, meta = gen.observations, gen.meta
    if kind == "drop-exit":
        return [i for i in range(n) if meta[i].role in ("exit", "merged")]
    if kind == "inject-unexpected":
        return list(range(n + 1))
    if kind == "violate-postcondition":
        return [i for i in range(n) if meta[i].post_facts]
    if kind == "corrupt-arg":
        return [i for i in range(n) if meta[i].checkable_slots]
    if kind == "swap-order":
        return [i for i in range(n - 1) if not order_insensitive(gen, i)]
    raise ValueError(f"unknown fault kind {kind!r}")


def order_insensitive(gen: GeneratedTrace, i: int) -> bool:
    """Conservative static check that swapping ``i`` and ``i+1`` changes nothing."""
    a, b = gen.observations[i], gen.observations[i + 1]
    ma, mb = gen.meta[i], gen.meta[i + 1]
    if (a.event, a.tag, a.args) == (b.event, b.tag, b.args) and not a.facts and not b.facts:
        return True
    return ma.role == mb.role == "allowable" and ma.instance == mb.instance


def expected_bad_indices(fault: Fault) -> set[int]:
    """Indices at which the monitor may first report the fault.

    Swapping an observation with the one that follows it can only be noticed
    once the second of the pair arrives, e.g. an exit moved ahead of its own
    allowable event is itself fine."""
    if fault.kind == "swap-order":
        return {fault.injection_index, fault.injection_index + 1}
    return {fault.injection_index}


def inject(gen: GeneratedTrace, fault: Fault) -> list[Observation]:
    i = fault.injection_index
    if i not in applicable_indices(gen, fault.kind):
        raise FaultNotApplicable(f"{fault.kind} cannot be injected at index {i}")
    obs = list(gen.observations)
    if fault.kind == "drop-exit":
        del obs[i]
    elif fault.kind == "inject-unexpected":
        ts = obs[i - 1].ts if i > 0 else (obs[0].ts if obs else 0)
        obs.insert(i, Observation(ROGUE_EVENT, ENTRY, (), PID, ts))
    elif fault.kind == "violate-postcondition":
        drop = set(gen.meta[i].post_facts)
        o = obs[i]
        obs[i] = Observation(o.event, o.tag, o.args, o.pid, o.ts,
                             tuple(f for f in o.facts if f.fact not in drop))
    elif fault.kind == "corrupt-arg":
        o = obs[i]
        slot = gen.meta[i].checkable_slots[0]
        args = list(o.args)
        args[slot] = ObjectRef(f"bogus#{i}")
        obs[i] = Observation(o.event, o.tag, tuple(args), o.pid, o.ts, o.facts)
    elif fault.kind == "swap-order":
        obs[i], obs[i + 1] = obs[i + 1], obs[i]
    return obs


def generate(m: SamModel, sc: Scenario, f: Optional[Fault] = None) -> list[Observation]:
    gen = simulate(m, sc)
    if f is None:
        return list(gen.observations)
    return inject(gen, f)


def load_scenario(text: str) -> Scenario:
    return Scenario.from_json(json.loads(text))
