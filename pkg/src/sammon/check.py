"""Static lint over a loaded model.

Findings are data, never exceptions.  Errors make a model unusable for
monitoring; warnings flag suspicious but loadable content.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from decimal import Decimal
from typing import Optional

from .model import Ensemble, SamModel
from .sexpr import Pos

ERROR = "error"
WARNING = "warning"

PROB_TOLERANCE = Decimal("1e-9")


@dataclass(frozen=True)
class Finding:
    severity: str
    code: str
    message: str
    location: Optional[Pos] = None

    def __str__(self):
        where = f"{self.location}: " if self.location else ""
        return f"{where}{self.severity}: {self.code}: {self.message}"

    def to_json(self) -> dict:
        return {"severity": self.severity, "code": self.code, "message": self.message,
                "location": str(self.location) if self.location else None}


def has_errors(findings) -> bool:
    return any(f.severity == ERROR for f in findings)


def node_names(ens: Ensemble) -> set[str]:
    """Every name a flow inside ``ens`` may legitimately mention."""
    names = {ens.name}
    names.update(c.name for c in ens.components)
    for s in ens.splits:
        names.add(s.name)
        names.update(f"{s.name}-{b}" for b in s.branches)
    for j in ens.joins:
        names.add(j.name)
        names.update(f"{j.name}-{b}" for b in j.branches)
    return names


def _branch_owner(ens: Ensemble, name: str):
    """Split or join whose name prefixes ``name`` as ``owner-branch``."""
    for d in (*ens.splits, *ens.joins):
        if name.startswith(d.name + "-"):
            return d
    return None


def check_model(m: SamModel) -> list[Finding]:
    out: list[Finding] = []
    add = lambda sev, code, msg, pos=None: out.append(Finding(sev, code, msg, pos))

    tops = m.top_candidates()
    if not tops:
        add(ERROR, "MissingTop", "no ensemble has :entry-events :auto outside every :components clause")
    elif len(tops) > 1:
        add(ERROR, "AmbiguousTop", "several top-level candidates: " + ", ".join(tops))

    declared_vulns = set()
    for ens in m.ensembles.values():
        _check_ensemble(m, ens, add)
        declared_vulns.update(v for _, v in ens.vulnerabilities)

    # reachability from the top component
    if len(tops) == 1:
        seen = set()
        todo = [tops[0]]
        while todo:
            n = todo.pop()
            if n in seen or n not in m.ensembles:
                continue
            seen.add(n)
            todo.extend(c.type for c in m.ensembles[n].components)
        for n, ens in m.ensembles.items():
            if n not in seen:
                add(WARNING, "Unreachable", f"ensemble {n} is not reachable from {tops[0]}", ens.pos)

    for (comp, mode), b in m.behaviors.items():
        ens = m.ensembles.get(comp)
        if ens is None:
            add(ERROR, "DanglingBehavior", f"behavior model ({comp} {mode}) names no ensemble", b.pos)
            continue
        if set(b.inputs) != set(ens.inputs) or set(b.outputs) != set(ens.outputs):
            add(ERROR, "IOMismatch",
                f"behavior model ({comp} {mode}) ports differ from ensemble {comp}", b.pos)

    attacks = set()
    mapped_vulns = set()
    for am in m.attack_models.values():
        attacks.update(a for a, _ in am.attack_types)
    for am in m.attack_models.values():
        for vuln, atk in am.vulnerability_mapping:
            mapped_vulns.add(vuln)
            if atk not in attacks:
                add(ERROR, "DanglingAttack", f"vulnerability {vuln} maps to unknown attack {atk}", am.pos)
    for v in sorted(declared_vulns - mapped_vulns):
        add(WARNING, "UnmappedVulnerability", f"vulnerability {v} appears in no attack model")

    res_types = {r.res_type for r in m.resources().values()}
    for r in m.attack_rules:
        if r.attack is not None and r.attack not in attacks:
            add(ERROR, "DanglingAttack", f"rule {r.name} names unknown attack {r.attack}", r.pos)
        for c in r.consequences:
            if c.attack not in attacks:
                add(ERROR, "DanglingAttack", f"rule {r.name} names unknown attack {c.attack}", r.pos)
        if r.resource_type is not None and r.resource_type not in res_types:
            add(WARNING, "VacuousRule",
                f"rule {r.name} needs resource type {r.resource_type}, which no resource has", r.pos)
    return out


def _check_ensemble(m: SamModel, ens: Ensemble, add) -> None:
    names = node_names(ens)
    resources = {r.name for r in ens.resources}
    components = {c.name for c in ens.components}

    for c in ens.components:
        if c.type not in m.ensembles:
            add(ERROR, "DanglingComponentType",
                f"{ens.name}: component {c.name} has unknown type {c.type}", c.pos)

    for s in ens.splits:
        sm = m.splits.get(s.split_model)
        if sm is None:
            add(ERROR, "DanglingSplitModel",
                f"{ens.name}: split {s.name} uses unknown split model {s.split_model}", s.pos)
            continue
        for b in s.branches:
            if b not in sm.branch_names:
                add(ERROR, "DanglingBranch",
                    f"{ens.name}: split {s.name} branch {b} is not in {sm.name}", s.pos)
        if s.params and len(s.params) != len(sm.params):
            add(ERROR, "SplitArity",
                f"{ens.name}: split {s.name} has {len(s.params)} ports, {sm.name} takes {len(sm.params)}",
                s.pos)

    def endpoint(name, where, severity, pos=None):
        if name in names:
            return
        owner = _branch_owner(ens, name)
        if owner is not None:
            add(ERROR, "DanglingBranch", f"{ens.name}: {where} names unknown branch {name}", pos)
        else:
            add(severity, "DanglingEndpoint", f"{ens.name}: {where} names unknown node {name}", pos)

    for p in ens.controlflows:
        endpoint(p.endpoint, "controlflow", ERROR, ens.pos)
    for df in ens.dataflows:
        for _, node in df.hops:
            endpoint(node, "dataflow", WARNING, df.pos)

    for comp, res in ens.resource_mappings:
        if comp not in components:
            add(WARNING, "DanglingEndpoint",
                f"{ens.name}: resource mapping names unknown component {comp}", ens.pos)
        if res not in resources:
            add(ERROR, "DanglingResource", f"{ens.name}: resource {res} is not declared", ens.pos)

    groups: dict = defaultdict(list)
    for mm in ens.model_mappings:
        if mm.component not in components:
            add(WARNING, "DanglingEndpoint",
                f"{ens.name}: model mapping names unknown component {mm.component}", mm.pos)
        for res, _ in mm.resource_context:
            if res not in resources:
                add(ERROR, "DanglingResource", f"{ens.name}: resource {res} is not declared", mm.pos)
        groups[(mm.component, frozenset(mm.resource_context))].append(mm)
    for (comp, ctx), mms in groups.items():
        total = sum((mm.probability for mm in mms), Decimal(0))
        if abs(total - 1) > PROB_TOLERANCE:
            ctx_text = " ".join(f"({r} {md})" for r, md in sorted(ctx))
            add(WARNING, "ProbSum",
                f"{ens.name}: {comp} given {ctx_text} sums to {total}", mms[0].pos)

    for res, _ in ens.vulnerabilities:
        if res not in resources:
            add(ERROR, "DanglingResource", f"{ens.name}: resource {res} is not declared", ens.pos)

    for r in ens.resources:
        total = sum((p for _, p in r.mode_priors), Decimal(0))
        if abs(total - 1) > PROB_TOLERANCE:
            add(WARNING, "ProbSum", f"{ens.name}: priors of resource {r.name} sum to {total}", r.pos)

    if m.registered_events:
        refs = (*ens.entry_refs, *ens.exit_events, *ens.allowable_events)
        for ref in refs:
            if ref.name not in m.registered_events:
                add(WARNING, "UnregisteredEvent", f"{ens.name}: event {ref.name} is not registered",
                    ref.pos)
