"""Posterior inference over attacks, resource modes and component modes.

The joint distribution factors as

    P(attacks) * P(resources | attacks) * P(components | resources)

and is small enough to enumerate exactly.  Several attacks reaching one
resource combine their hacked-probabilities by noisy-or.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .model import COMPROMISED, HACKED, NORMAL, SamModel

OCCURRED = "occurred"
ABSENT = "absent"


class NoAttackModel(Exception):
    pass


@dataclass(frozen=True)
class Evidence:
    """Observed modes keyed by instance id (``a/b/c``) or component name."""
    observed_component_modes: Mapping[str, str]
    trigger: object = None


@dataclass
class DiagnosisReport:
    attack_posteriors: dict
    resource_mode_posteriors: dict  # (resource, mode) -> probability
    ranked_assignments: list  # (assignment dict, probability), best first
    recovered: bool
    warnings: list = field(default_factory=list)
    component_modes: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, note: str) -> "DiagnosisReport":
        return cls({}, {}, [], False, [note])

    def to_json(self, digits: int = 12) -> dict:
        r = lambda p: float(f"{p:.{digits}g}")
        return {
            "recovered": self.recovered,
            "attack_posteriors": {a: r(p) for a, p in sorted(self.attack_posteriors.items())},
            "resource_mode_posteriors": {
                f"{res}:{mode}": r(p) for (res, mode), p in sorted(self.resource_mode_posteriors.items())},
            "component_modes": dict(sorted(self.component_modes.items())),
            "ranked_assignments": [
                {"assignment": dict(sorted(a.items())), "probability": r(p)}
                for a, p in self.ranked_assignments],
            "warnings": list(self.warnings),
        }


def component_name(key: str) -> str:
    """Local component name of an instance id such as ``maf-editor/save``."""
    return key.rsplit("/", 1)[-1]


def aggregate_evidence(observed: Mapping[str, str]) -> dict[str, str]:
    """Collapse instance ids to component names; compromised dominates."""
    out: dict[str, str] = {}
    for key, mode in observed.items():
        if mode not in (NORMAL, COMPROMISED):
            raise ValueError(f"unknown component mode {mode!r} for {key}")
        name = component_name(key)
        if out.get(name) != COMPROMISED:
            out[name] = mode
    return out


@dataclass(frozen=True)
class _Problem:
    attacks: tuple  # (name, prior)
    resources: tuple  # (name, p_hacked_prior)
    reach: dict  # resource -> ((attack, p_hacked), ...)
    components: tuple  # (name, observed mode, declared modes, mappings)


def _p_hacked(h, n, fallback):
    total = h + n
    return h / total if total > 0 else fallback


def _problem(m: SamModel, observed: Mapping[str, str]) -> _Problem:
    attacks = tuple((a, float(p)) for a, p in m.attack_priors().items())
    resources = m.resources()
    vulns: dict[str, set] = {}
    for ens in m.ensembles.values():
        for res, v in ens.vulnerabilities:
            vulns.setdefault(res, set()).add(v)
    vuln_attacks: dict[str, set] = {}
    for am in m.attack_models.values():
        for v, a in am.vulnerability_mapping:
            vuln_attacks.setdefault(v, set()).add(a)

    res_list = []
    reach = {}
    for name, r in resources.items():
        prior = _p_hacked(float(r.prior(HACKED)), float(r.prior(NORMAL)), 0.0)
        res_list.append((name, prior))
        reaching = set().union(*(vuln_attacks.get(v, set()) for v in vulns.get(name, ())))
        pairs = []
        for a, _ in attacks:
            if a not in reaching:
                continue
            for rule in m.attack_rules:
                if rule.resource_type != r.res_type or rule.attack not in (None, a):
                    continue
                cons = [c for c in rule.consequences if c.attack == a]
                if not cons:
                    continue
                h = sum(float(c.probability) for c in cons if c.resource_mode == HACKED)
                n = sum(float(c.probability) for c in cons if c.resource_mode == NORMAL)
                pairs.append((a, _p_hacked(h, n, prior)))
                break  # the first matching rule per attack applies
        reach[name] = tuple(pairs)

    comps = []
    for name, mode in observed.items():
        declared: set = set()
        mappings = []
        for ens in m.ensembles.values():
            for c in ens.components:
                if c.name == name:
                    declared.update(c.declared_modes)
            mappings.extend(mm for mm in ens.model_mappings if mm.component == name)
        if not declared:
            declared = {NORMAL, COMPROMISED}
        comps.append((name, mode, frozenset(declared), tuple(mappings)))
    return _Problem(attacks, tuple(res_list), reach, tuple(comps))


def _resource_factor(prob: _Problem, res, prior, mode, attack_state) -> float:
    hits = [p for a, p in prob.reach[res] if attack_state[a]]
    if hits:
        ph = 1.0 - math.prod(1.0 - p for p in hits)
    else:
        ph = prior
    return ph if mode == HACKED else 1.0 - ph


def _component_factor(mode, declared, mappings, res_state) -> float:
    if mode not in declared:
        return 0.0
    if not mappings:
        return 1.0
    best = None
    for mm in mappings:
        if mm.component_mode != mode:
            continue
        if all(res_state.get(r) == rm for r, rm in mm.resource_context):
            if best is None or len(mm.resource_context) > len(best.resource_context):
                best = mm
    return float(best.probability) if best is not None else 0.0


def diagnose(m: SamModel, ev: Evidence) -> DiagnosisReport:
    if not m.attack_models:
        raise NoAttackModel("the model declares no attack model")
    if not ev.observed_component_modes:
        raise ValueError("evidence is empty")
    observed = aggregate_evidence(ev.observed_component_modes)
    prob = _problem(m, observed)
    attack_names = [a for a, _ in prob.attacks]
    res_names = [r for r, _ in prob.resources]

    rows = []
    for a_bits in itertools.product((True, False), repeat=len(prob.attacks)):
        a_state = dict(zip(attack_names, a_bits))
        w_a = math.prod(p if on else 1.0 - p for (_, p), on in zip(prob.attacks, a_bits))
        for r_modes in itertools.product((NORMAL, HACKED), repeat=len(prob.resources)):
            r_state = dict(zip(res_names, r_modes))
            w_r = math.prod(_resource_factor(prob, r, pr, md, a_state)
                            for (r, pr), md in zip(prob.resources, r_modes))
            w_c = math.prod(_component_factor(md, decl, mms, r_state)
                            for _, md, decl, mms in prob.components)
            rows.append((a_state, r_state, w_a * w_r, w_c))

    warnings = []
    z = math.fsum(w * wc for _, _, w, wc in rows)
    recovered = z > 0
    if recovered:
        weights = [w * wc / z for _, _, w, wc in rows]
    else:
        warnings.append("UnexplainableEvidence: no assignment explains the evidence; "
                        "reporting the unconditioned prior")
        z0 = math.fsum(w for _, _, w, _ in rows)
        weights = [w / z0 if z0 > 0 else 0.0 for _, _, w, _ in rows]

    attack_post = {a: math.fsum(w for (st, _, _, _), w in zip(rows, weights) if st[a])
                   for a in attack_names}
    res_post = {}
    for r in res_names:
        h = math.fsum(w for (_, rs, _, _), w in zip(rows, weights) if rs[r] == HACKED)
        n = math.fsum(w for (_, rs, _, _), w in zip(rows, weights) if rs[r] == NORMAL)
        res_post[(r, HACKED)] = h
        res_post[(r, NORMAL)] = n

    ranked = []
    for (a_state, r_state, _, _), w in zip(rows, weights):
        assignment = {f"attack:{a}": OCCURRED if on else ABSENT for a, on in a_state.items()}
        assignment.update({f"resource:{r}": md for r, md in r_state.items()})
        assignment.update({f"component:{c}": md for c, md in observed.items()})
        ranked.append((assignment, w))
    ranked.sort(key=lambda x: -x[1])  # stable: ties keep enumeration order
    return DiagnosisReport(attack_post, res_post, ranked, recovered, warnings, observed)
