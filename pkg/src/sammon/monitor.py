"""Execution monitor: compare an observation stream with the model's predictions.

Each ensemble activation is a :class:`ComponentInstance`.  A composite
instance owns a :class:`Network` holding the state of its subnetwork:
port buffers of nodes not yet activated, fired control points, split and
join state.  Work triggered by one observation (data propagation, control
firing, automatic starts and completions) runs off an agenda rather than
recursion, so deep re-entrant activations do not exhaust the Python stack.
"""

from __future__ import annotations

import datetime as _dt
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .check import ERROR, check_model, node_names
from .model import NORMAL, COMPROMISED, ControlPoint, Ensemble, EventRef, SamModel
from .semantics import (
    COMPLETED, READY, RUNNING, ConditionError, FactStore, PredicateRegistry, RtState,
    conditions_hold, eval_split, registry_for_model, set_flag, set_mode,
)
from .trace import ENTRY, EXIT, Observation

# dispositions
D_ENTRY = "entry"
D_EXIT = "exit"
D_ALLOWABLE = "allowable"
D_UNEXPECTED = "unexpected"
D_PRE_FAIL = "precondition-fail"
D_POST_FAIL = "postcondition-fail"
BAD_DISPOSITIONS = (D_UNEXPECTED, D_PRE_FAIL, D_POST_FAIL)

CONSISTENT = "consistent"


class ModelStaticError(Exception):
    def __init__(self, findings):
        errs = [f for f in findings if f.severity == ERROR]
        super().__init__("model has static errors:\n" + "\n".join(str(f) for f in errs))
        self.findings = findings


@dataclass(frozen=True)
class MonitorOptions:
    recursion_limit: int = 1024
    registry: Optional[PredicateRegistry] = None
    diagnose: bool = True
    check: bool = True


@dataclass(frozen=True)
class MonitorStep:
    index: int
    observation: Optional[Observation]
    instance_id: Optional[str]
    disposition: str
    flag: Optional[str]
    mode: Optional[str]
    detail: str = ""

    @property
    def is_bad(self) -> bool:
        return self.disposition in BAD_DISPOSITIONS


@dataclass
class Verdict:
    outcome: str
    trail: list
    diagnosis: object = None
    warnings: list = field(default_factory=list)
    evidence: dict = field(default_factory=dict)
    transitions: list = field(default_factory=list)  # (instance id, flag or mode) in order

    @property
    def first_bad(self) -> Optional[MonitorStep]:
        for s in self.trail:
            if s.is_bad:
                return s
        return None


# matching ------------------------------------------------------------------------


def match_event(o: Observation, refs: Iterable[EventRef]) -> Optional[EventRef]:
    """First ref with the same name, a compatible tag and a matching arity."""
    for ref in refs:
        if ref.name != o.event:
            continue
        if ref.tag_filter is not None and ref.tag_filter != o.tag:
            continue
        if ref.param_pattern is not None and len(ref.param_pattern) != len(o.args):
            continue
        return ref
    return None


def _match_role(o: Observation, refs, role: str) -> Optional[EventRef]:
    """Like :func:`match_event`, but an untagged entry (exit) ref only
    matches entry (exit) observations, so that an event named in both
    clauses is not completed by its own entry."""
    for ref in refs:
        if ref.tag_filter is None and o.tag != role:
            continue
        if match_event(o, (ref,)) is not None:
            return ref
    return None


def bind_outputs(ens: Ensemble, ref: EventRef, args) -> dict:
    if ref.param_pattern is not None:
        return {p: a for p, a in zip(ref.param_pattern, args) if p is not None and p in ens.outputs}
    return dict(zip(ens.outputs, args))


# runtime structures -----------------------------------------------------------


class _Compromise(Exception):
    def __init__(self, inst, disposition, detail):
        super().__init__(detail)
        self.inst = inst
        self.disposition = disposition
        self.detail = detail


@dataclass(eq=False)
class ComponentInstance:
    id: str
    ensemble: Ensemble
    local_name: str
    parent: Optional["ComponentInstance"]
    depth: int
    seq: int
    rt_state: RtState = field(default_factory=RtState)
    input_ports: dict = field(default_factory=dict)
    output_ports: dict = field(default_factory=dict)
    entry_snapshot_label: Optional[str] = None
    arrival_index: Optional[int] = None
    pending_entry: bool = False
    network: Optional["Network"] = None
    abandoned: bool = False

    @property
    def flag(self):
        return self.rt_state.flag

    @property
    def mode(self):
        return self.rt_state.mode

    @property
    def is_leaf(self):
        return not self.ensemble.components

    @property
    def data_complete(self):
        return all(p in self.input_ports for p in self.ensemble.inputs)

    @property
    def children(self) -> dict:
        return dict(self.network.instances) if self.network else {}


@dataclass(eq=False)
class Network:
    owner: ComponentInstance
    preds: dict  # node -> set of ControlPoints that must fire first
    fired: set = field(default_factory=set)
    buffers: dict = field(default_factory=dict)  # node -> {port: value}
    instances: dict = field(default_factory=dict)  # local component name -> instance
    split_taken: dict = field(default_factory=dict)
    join_values: dict = field(default_factory=dict)  # join -> {port: value}
    names: set = field(default_factory=set)

    @property
    def ens(self) -> Ensemble:
        return self.owner.ensemble

    def enabled(self, node: str) -> bool:
        return self.preds.get(node, set()) <= self.fired


def _preds(ens: Ensemble) -> dict:
    out: dict = {}
    for e in ens.control_edges:
        out.setdefault(e.target.endpoint, set()).add(e.source)
    return out


# the monitor --------------------------------------------------------------------


class Monitor:
    """Incremental monitor; feed observations one at a time."""

    def __init__(self, model: SamModel, opts: MonitorOptions = MonitorOptions()):
        self.model = model
        self.opts = opts
        if opts.check:
            findings = check_model(model)
            if any(f.severity == ERROR for f in findings):
                raise ModelStaticError(findings)
        if model.top_component is None:
            raise ModelStaticError([])
        self.registry = opts.registry if opts.registry is not None else registry_for_model(model)
        self.facts = FactStore()
        self.trail: list[MonitorStep] = []
        self.warnings: list[str] = []
        self.transitions: list[tuple[str, str]] = []
        self.instances: list[ComponentInstance] = []
        self.index = 0
        self.stopped = False
        self.verdict: Optional[Verdict] = None
        self._seq = 0
        self._agenda: deque = deque()
        self._pid = None
        self._last_ts = None
        self._warned_nodes: set = set()
        self._failure: Optional[_Compromise] = None

        top_name = model.top_component
        self.top = self._new_instance(model.ensembles[top_name], top_name, None)
        try:
            # startup: the top component is activated and runs immediately
            self._start(self.top)
            self._drain()
        except _Compromise as c:
            self._failure = c

    # instance lifecycle -------------------------------------------------------

    def _new_instance(self, ens, local, parent) -> ComponentInstance:
        self._seq += 1
        depth = parent.depth + 1 if parent else 0
        iid = f"{parent.id}/{local}" if parent else local
        inst = ComponentInstance(iid, ens, local, parent, depth, self._seq)
        if depth > self.opts.recursion_limit:
            raise _Compromise(inst, D_UNEXPECTED,
                              f"activation depth exceeds the limit of {self.opts.recursion_limit}")
        self.instances.append(inst)
        self.transitions.append((iid, READY))
        return inst

    def _set_flag(self, inst, flag):
        inst.rt_state = set_flag(inst.rt_state, flag)
        self.transitions.append((inst.id, flag))

    def _compromise(self, inst, disposition, detail):
        raise _Compromise(inst, disposition, detail)

    def _behavior(self, inst, mode=NORMAL):
        return self.model.behavior(inst.ensemble.name, mode)

    def _bindings(self, inst) -> dict:
        b = dict(inst.input_ports)
        b.update(inst.output_ports)
        return b

    def _holds(self, inst, conds) -> bool:
        try:
            return conditions_hold(conds, self._bindings(inst), self.facts,
                                   inst.entry_snapshot_label, self.registry)
        except ConditionError as exc:
            self._compromise(inst, D_UNEXPECTED, f"cannot evaluate condition: {exc}")

    def _start(self, inst: ComponentInstance):
        """Move a ready, data-complete instance to running."""
        label = f"{inst.id}@{inst.seq}"
        inst.entry_snapshot_label = label
        self.facts.snapshot(label)
        inst.arrival_index = self.index
        normal = self._behavior(inst)
        if normal is not None and not self._holds(inst, normal.prerequisites):
            inst.rt_state = set_mode(inst.rt_state, COMPROMISED)
            comp = self._behavior(inst, COMPROMISED)
            which = ("compromised prerequisites hold"
                     if comp is not None and comp.prerequisites and self._holds(inst, comp.prerequisites)
                     else "normal prerequisites fail")
            self._compromise(inst, D_PRE_FAIL, which)
        self._set_flag(inst, RUNNING)
        parent = inst.parent
        if parent is not None:
            self._agenda.append(("fire", parent.network, ControlPoint("before", inst.local_name)))
        if inst.is_leaf:
            if not inst.ensemble.exit_events:
                self._finish(inst)
            return
        net = Network(inst, _preds(inst.ensemble), names=node_names(inst.ensemble))
        inst.network = net
        self._agenda.append(("fire", net, ControlPoint("before", inst.ensemble.name)))
        for port in inst.ensemble.inputs:
            self._agenda.append(("emit", net, inst.ensemble.name, port, inst.input_ports[port]))
        for c in inst.ensemble.components:
            self._agenda.append(("enable", net, c.name))
        self._agenda.append(("complete?", inst))

    def _finish(self, inst: ComponentInstance):
        """Evaluate postconditions and complete ``inst``."""
        missing = [p for p in inst.ensemble.outputs if p not in inst.output_ports]
        if missing and (inst.is_leaf or inst.ensemble.exit_events):
            inst.rt_state = set_mode(inst.rt_state, COMPROMISED)
            self._compromise(inst, D_POST_FAIL, "missing outputs: " + ", ".join(missing))
        normal = self._behavior(inst)
        if normal is not None and not self._holds(inst, normal.postconditions):
            inst.rt_state = set_mode(inst.rt_state, COMPROMISED)
            comp = self._behavior(inst, COMPROMISED)
            which = ("compromised postconditions hold"
                     if comp is not None and comp.postconditions and self._holds(inst, comp.postconditions)
                     else "normal postconditions fail")
            self._compromise(inst, D_POST_FAIL, which)
        self._set_flag(inst, COMPLETED)
        if inst.network is not None:
            for child in inst.network.instances.values():
                if child.flag == READY:
                    child.abandoned = True
        parent = inst.parent
        if parent is None:
            return
        net = parent.network
        for port, v in inst.output_ports.items():
            self._agenda.append(("emit", net, inst.local_name, port, v))
        self._agenda.append(("fire", net, ControlPoint("after", inst.local_name)))
        self._agenda.append(("complete?", parent))

    def _try_start(self, inst):
        if inst.flag != READY or inst.abandoned or not inst.data_complete:
            return
        ens = inst.ensemble
        if inst.pending_entry or ens.is_auto or not ens.entry_refs:
            self._start(inst)

    def _try_complete(self, inst):
        if inst.flag != RUNNING or inst.is_leaf or inst.ensemble.exit_events:
            return
        net = inst.network
        if any(c.flag == RUNNING for c in net.instances.values()):
            return
        ens = inst.ensemble
        fed = {p for df in ens.dataflows for p, n in df.destinations if n == ens.name}
        if fed:
            if not all(p in inst.output_ports for p in ens.outputs if p in fed):
                return
        else:
            for c in ens.components:
                child = net.instances.get(c.name)
                if child is None or child.flag != COMPLETED:
                    return
        self._finish(inst)

    # network plumbing ----------------------------------------------------------

    def _drain(self):
        while self._agenda:
            item = self._agenda.popleft()
            kind = item[0]
            if kind == "emit":
                self._emit(*item[1:])
            elif kind == "deliver":
                self._deliver(*item[1:])
            elif kind == "fire":
                self._fire(*item[1:])
            elif kind == "enable":
                self._enable(*item[1:])
            elif kind == "start?":
                self._try_start(item[1])
            elif kind == "complete?":
                self._try_complete(item[1])

    def _active_net(self, net) -> bool:
        return net.owner.flag == RUNNING

    def _emit(self, net: Network, node: str, port: str, value):
        if not self._active_net(net):
            return
        for df in net.ens.dataflows:
            if df.source == (port, node):
                for dport, dnode in df.destinations:
                    self._agenda.append(("deliver", net, dnode, dport, value))

    def _deliver(self, net: Network, node: str, port: str, value):
        if not self._active_net(net):
            return
        ens = net.ens
        owner = net.owner
        if node == ens.name:
            if port not in ens.outputs:
                self._compromise(owner, D_UNEXPECTED, f"{ens.name} has no output port {port}")
            owner.output_ports.setdefault(port, value)
            self._agenda.append(("complete?", owner))
            return
        comp = ens.component(node)
        if comp is not None:
            target = self.model.ensembles[comp.type]
            if port not in target.inputs:
                self._compromise(owner, D_UNEXPECTED, f"{node} has no input port {port}")
            inst = net.instances.get(node)
            if inst is not None and inst.flag == READY:
                inst.input_ports[port] = value
                self._agenda.append(("start?", inst))
            else:
                net.buffers.setdefault(node, {})[port] = value
            return
        split = ens.split(node)
        if split is not None:
            self._split_input(net, split, port, value)
            return
        join = ens.join(node)
        if join is not None:
            # data sent to a join directly enters through no particular branch
            self._join_input(net, join, None, port, value)
            return
        for j in ens.joins:
            if node.startswith(j.name + "-") and node[len(j.name) + 1:] in j.branches:
                net.buffers.setdefault(node, {}).setdefault(port, value)
                self._flush_join_branch(net, j, node[len(j.name) + 1:])
                return
        for s in ens.splits:
            if node.startswith(s.name + "-") and node[len(s.name) + 1:] in s.branches:
                # split branch nodes relay data once their branch is taken
                net.buffers.setdefault(node, {})[port] = value
                if net.split_taken.get(s.name) == node[len(s.name) + 1:]:
                    self._agenda.append(("emit", net, node, port, value))
                return
        if (ens.name, node) not in self._warned_nodes:
            self._warned_nodes.add((ens.name, node))
            self.warnings.append(f"{ens.name}: data for unknown node {node} dropped")

    def _split_input(self, net, split, port, value):
        sm = self.model.splits[split.split_model]
        ports = split.params or sm.params
        if port not in ports:
            self._compromise(net.owner, D_UNEXPECTED, f"split {split.name} has no port {port}")
        if split.name in net.split_taken:
            return
        buf = net.buffers.setdefault(split.name, {})
        buf[port] = value
        if not all(p in buf for p in ports):
            return
        try:
            branch = eval_split(sm, [buf[p] for p in ports], self.registry, self.facts)
        except ConditionError as exc:
            self._compromise(net.owner, D_UNEXPECTED, f"split {split.name}: {exc}")
        if branch not in split.branches:
            self._compromise(net.owner, D_UNEXPECTED,
                             f"split {split.name} chose undeclared branch {branch}")
        net.split_taken[split.name] = branch
        bnode = f"{split.name}-{branch}"
        self._agenda.append(("fire", net, ControlPoint("after", bnode)))
        self._agenda.append(("fire", net, ControlPoint("after", split.name)))
        for p in ports:
            self._agenda.append(("emit", net, bnode, p, buf[p]))
        for p, v in net.buffers.get(bnode, {}).items():
            self._agenda.append(("emit", net, bnode, p, v))

    def _flush_join_branch(self, net, join, branch):
        node = f"{join.name}-{branch}"
        if not net.enabled(node):
            return
        for port, v in net.buffers.pop(node, {}).items():
            self._join_input(net, join, branch, port, v)

    def _join_input(self, net, join, branch, port, value):
        if join.ports and port not in join.ports:
            self._compromise(net.owner, D_UNEXPECTED, f"join {join.name} has no port {port}")
        vals = net.join_values.setdefault(join.name, {})
        if port in vals:
            if vals[port] != value:
                self.warnings.append(
                    f"{net.owner.id}: join {join.name} port {port} got a second, different value")
            return
        vals[port] = value
        self._agenda.append(("emit", net, join.name, port, value))
        if branch is not None:
            self._agenda.append(("fire", net, ControlPoint("after", f"{join.name}-{branch}")))
        self._agenda.append(("fire", net, ControlPoint("after", join.name)))

    def _fire(self, net: Network, point: ControlPoint):
        if not self._active_net(net) or point in net.fired:
            return
        net.fired.add(point)
        for node, preds in net.preds.items():
            if point in preds and preds <= net.fired:
                self._agenda.append(("enable", net, node))

    def _enable(self, net: Network, node: str):
        if not self._active_net(net) or not net.enabled(node):
            return
        comp = net.ens.component(node)
        if comp is not None:
            if node in net.instances:
                return
            inst = self._new_instance(self.model.ensembles[comp.type], node, net.owner)
            net.instances[node] = inst
            inst.input_ports.update(net.buffers.pop(node, {}))
            self._agenda.append(("start?", inst))
            return
        for j in net.ens.joins:
            if node.startswith(j.name + "-") and node[len(j.name) + 1:] in j.branches:
                self._flush_join_branch(net, j, node[len(j.name) + 1:])

    # dispatch -------------------------------------------------------------------

    def _live(self):
        return [i for i in self.instances
                if not i.abandoned and i.flag != COMPLETED and self._ancestors_running(i)]

    @staticmethod
    def _ancestors_running(inst) -> bool:
        p = inst.parent
        while p is not None:
            if p.flag != RUNNING:
                return False
            p = p.parent
        return True

    def _allowables(self, inst):
        refs = list(inst.ensemble.allowable_events)
        b = self._behavior(inst)
        if b is not None:
            refs.extend(b.allowable_events)
        return refs

    def _try_entry(self, o: Observation, live) -> Optional[ComponentInstance]:
        for inst in live:
            if inst.flag == READY and _match_role(o, inst.ensemble.entry_refs, ENTRY):
                inst.pending_entry = True
                self._try_start(inst)
                return inst
        return None

    def _exit(self, inst, o: Observation, ref: EventRef):
        inst.output_ports.update(bind_outputs(inst.ensemble, ref, o.args))
        self._finish(inst)

    def _dispatch(self, o: Observation) -> MonitorStep:
        if self.top.flag == COMPLETED:
            return self._step(o, self.top, D_UNEXPECTED, "observation after the top component completed")
        live = sorted(self._live(), key=lambda i: (i.depth, i.seq), reverse=True)
        leaves = [i for i in live if i.is_leaf and i.flag == RUNNING]
        if leaves:
            leaf = leaves[0]
            ref = _match_role(o, leaf.ensemble.exit_events, EXIT)
            if ref is not None:
                self._exit(leaf, o, ref)
                self._drain()
                also = self._try_entry(o, sorted(self._live(), key=lambda i: (i.depth, i.seq),
                                                 reverse=True))
                self._drain()
                detail = f"also entry of {also.id}" if also is not None else ""
                return self._step(o, leaf, D_EXIT, detail)
            if match_event(o, self._allowables(leaf)):
                return self._step(o, leaf, D_ALLOWABLE)
            return self._step(o, leaf, D_UNEXPECTED, f"{leaf.id} is running; event not predicted")
        if o.tag == EXIT:
            # a component cannot return before it has started
            for inst in live:
                if (inst.is_leaf and inst.flag == READY
                        and _match_role(o, inst.ensemble.exit_events, EXIT)):
                    return self._step(o, inst, D_UNEXPECTED, f"exit of {inst.id}, which has not started")
        for inst in live:
            if inst.flag == READY and _match_role(o, inst.ensemble.entry_refs, ENTRY):
                inst.pending_entry = True
                self._try_start(inst)
                self._drain()
                detail = "" if inst.flag != READY else "waiting for data"
                return self._step(o, inst, D_ENTRY, detail)
            if inst.flag == RUNNING:
                ref = _match_role(o, inst.ensemble.exit_events, EXIT)
                if ref is not None:
                    self._exit(inst, o, ref)
                    self._drain()
                    return self._step(o, inst, D_EXIT)
                if match_event(o, self._allowables(inst)):
                    return self._step(o, inst, D_ALLOWABLE)
        running = [i for i in live if i.flag == RUNNING]
        where = running[0] if running else self.top
        return self._step(o, where, D_UNEXPECTED, "event not predicted by any active component")

    def _step(self, o, inst, disposition, detail="") -> MonitorStep:
        if disposition in BAD_DISPOSITIONS and inst is not None:
            inst.rt_state = set_mode(inst.rt_state, COMPROMISED)
            self.transitions.append((inst.id, COMPROMISED))
        return MonitorStep(self.index, o, inst.id if inst else None, disposition,
                           inst.flag if inst else None, inst.mode if inst else None, detail)

    def _lint(self, o: Observation):
        if self._pid is None:
            self._pid = o.pid
        elif o.pid != self._pid:
            self.warnings.append(f"step {self.index}: process id changed from {self._pid} to {o.pid}")
            self._pid = o.pid
        ts = _ts_key(o.ts)
        if ts is not None and self._last_ts is not None and type(ts) is type(self._last_ts):
            if ts < self._last_ts:
                self.warnings.append(f"step {self.index}: timestamp decreases")
        if ts is not None:
            self._last_ts = ts

    # public API -----------------------------------------------------------------

    def feed(self, o: Observation) -> MonitorStep | None:
        """Process one observation; returns its step, or None once stopped."""
        if self.stopped:
            return None
        if self._failure is not None:
            # startup itself failed; report against the first observation
            step = self._failure_step(o, self._failure)
            self.trail.append(step)
            self.stopped = True
            return step
        self._lint(o)
        for f in o.facts:
            if f.op == "assert":
                self.facts.assert_fact(f.fact)
            else:
                self.facts.retract_fact(f.fact)
        try:
            step = self._dispatch(o)
        except _Compromise as c:
            self._agenda.clear()
            step = self._failure_step(o, c)
        self.trail.append(step)
        self.index += 1
        if step.is_bad:
            self.stopped = True
        return step

    def _failure_step(self, o, c: _Compromise) -> MonitorStep:
        inst = c.inst
        inst.rt_state = set_mode(inst.rt_state, COMPROMISED)
        self.transitions.append((inst.id, COMPROMISED))
        return MonitorStep(self.index, o, inst.id, c.disposition, inst.flag, inst.mode, c.detail)

    def finish(self) -> Verdict:
        if self.verdict is not None:
            return self.verdict
        if not self.stopped:
            if self._failure is not None:
                self.trail.append(self._failure_step(None, self._failure))
            elif not (self.top.flag == COMPLETED and self.top.mode == NORMAL):
                self.top.rt_state = set_mode(self.top.rt_state, COMPROMISED)
                self.transitions.append((self.top.id, COMPROMISED))
                self.trail.append(MonitorStep(self.index, None, self.top.id, D_UNEXPECTED,
                                              self.top.flag, self.top.mode,
                                              "stream exhausted before the top component completed"))
        bad = any(s.is_bad for s in self.trail)
        outcome = COMPROMISED if bad else CONSISTENT
        evidence = self.evidence() if bad else {}
        report = None
        if bad and self.opts.diagnose:
            report = self._diagnose(evidence)
        self.verdict = Verdict(outcome, list(self.trail), report, list(self.warnings),
                               evidence, list(self.transitions))
        return self.verdict

    def evidence(self) -> dict:
        """Observed component modes: completed instances normal, the culprit compromised."""
        ev = {i.id: NORMAL for i in self.instances if i.flag == COMPLETED and i.mode == NORMAL}
        bad = self.first_bad
        if bad is not None and bad.instance_id is not None:
            ev[bad.instance_id] = COMPROMISED
        return ev

    @property
    def first_bad(self):
        for s in self.trail:
            if s.is_bad:
                return s
        return None

    def _diagnose(self, evidence):
        from .diagnosis import DiagnosisReport, Evidence, NoAttackModel, diagnose
        try:
            return diagnose(self.model, Evidence(evidence, self.first_bad))
        except NoAttackModel as exc:
            return DiagnosisReport.empty(str(exc))


def _ts_key(ts):
    if isinstance(ts, int):
        return ts
    if isinstance(ts, str):
        try:
            return _dt.datetime.fromisoformat(ts.replace("Z", "+00:00")).timestamp()
        except ValueError:
            return None
    return None


def run_monitor(m: SamModel, stream: Iterable[Observation],
                opts: MonitorOptions = MonitorOptions()) -> Verdict:
    mon = Monitor(m, opts)
    for o in stream:
        mon.feed(o)
        if mon.stopped:
            break
    return mon.finish()
