from decimal import Decimal
from pathlib import Path

import pytest

from sammon import sexpr as sx
from sammon.check import check_model
from sammon.loader import (
    DuplicateDefinition, MalformedClause, UnknownTopForm, extend_model, load_model, load_text,
)
from sammon.model import (
    AUTO, ControlPoint, Dscs, EventRef, Literal, Member, Not, SamModel, SpecialFn,
)
from sammon.semantics import AttackVal, ComponentVal, build_environment

FIX = Path(__file__).parent / "fixtures"


def test_maf_counts(maf):
    assert len(maf.ensembles) == 12
    assert len(maf.behaviors) == 21
    assert len(maf.splits) == 2
    assert len(maf.attack_models) == 1
    assert len(maf.attack_rules) == 6
    assert maf.top_component == "maf-editor"


def test_both_auto_ensembles_but_one_top(maf):
    autos = sorted(n for n, e in maf.ensembles.items() if e.entry_events == AUTO)
    assert autos == ["maf-create-events", "maf-editor"]
    assert maf.top_candidates() == ["maf-editor"]


def test_editor_ensemble_alone():
    m = load_text((FIX / "editor.sam").read_text())
    ens = m.ensembles["maf-editor"]
    assert [c.name for c in ens.components] == ["startup", "create-model", "create-events", "save"]
    res = {r.name: dict(r.mode_priors) for r in ens.resources}
    assert res == {"imagery": {"normal": Decimal(".7"), "hacked": Decimal(".3")},
                   "code-files": {"normal": Decimal(".8"), "hacked": Decimal(".2")}}
    assert ens.model_mappings[0].resource_context == (("imagery", "normal"),)
    assert ens.model_mappings[0].probability == Decimal(".99")


def test_create_model_behaviors():
    m = load_text((FIX / "create_model.sam").read_text())
    assert m.behavior("maf-create-model").postconditions == (Dscs("the-model", "mission-builder", "good"),)
    assert m.behavior("maf-create-model", "compromised").postconditions == (
        Not(Dscs("the-model", "mission-builder", "good")),)


def test_postconditions_synonym():
    a = load_text("(defbehavior-model (c normal) :post-conditions ([dscs ?x t good]))")
    b = load_text("(defbehavior-model (c normal) :postconditions ([dscs ?x t good]))")
    assert a == b


def test_attack_model_and_rule():
    m = load_text((FIX / "attacks.sam").read_text())
    am = m.attack_models["maf-attacks"]
    # priors stay aligned with attack names in declaration order
    assert am.attack_types == (("hacked-image-file-attack", Decimal(".3")),
                               ("hacked-code-file-attack", Decimal(".5")))
    (rule,) = m.attack_rules
    assert rule.resource_type == "image-file"
    assert rule.attack == "hacked-image-file-attack"
    assert [(c.resource_mode, c.probability) for c in rule.consequences] == [
        ("hacked", Decimal(".9")), ("normal", Decimal(".1"))]


def test_attack_model_environment():
    m = load_text((FIX / "attacks.sam").read_text())
    env = build_environment(m)
    v = env.lookup("maf-attacks")
    assert isinstance(v, AttackVal)
    assert v.priors == (Decimal(".3"), Decimal(".5"))


def test_environment_of_maf(maf):
    env = build_environment(maf)
    assert env.lookup("maf-startup") == ComponentVal("maf-startup")
    assert env.space == 12 + 2 + 1


def test_empty_model():
    m = load_model([])
    assert m == SamModel()
    assert m.top_component is None
    assert [f.code for f in check_model(m)] == ["MissingTop"]


def test_controlflow_both_arities():
    m = load_text("""(define-ensemble e :entry-events :auto
        :components ((a :type leaf) (b :type leaf))
        :controlflows ((before e before a) (after a) (before b)))
        (define-ensemble leaf)""")
    edges = m.ensembles["e"].control_edges
    assert [(x.source, x.target) for x in edges] == [
        (ControlPoint("before", "e"), ControlPoint("before", "a")),
        (ControlPoint("after", "a"), ControlPoint("before", "b"))]


def test_event_refs(maf):
    get_leg = maf.ensembles["maf-get-leg"]
    assert get_leg.exit_events == (EventRef("retrieve-leg", "exit", (None, "the-leg", "lms-event-counter")),)
    info = maf.ensembles["maf-add-additional-info"]
    assert info.entry_refs == (EventRef("retrieve-sortie", "exit"),)


def test_special_function_condition(maf):
    post = maf.behavior("maf-add-event-to-model").postconditions[0]
    assert post == SpecialFn("add-to-map", (Member("events", "the-model"), "event-number", "the-event"),
                             ("before", "maf-add-event-to-model"))


def test_split_models(maf):
    sm = maf.splits["maf-more-events?"]
    assert sm.params == ("cmd",)
    assert sm.branch_names == ("build-event", "exit")
    decl = maf.ensembles["maf-create-events"].split("more-events?")
    assert decl.split_model == "maf-more-events?" and decl.params == ("cmd",)


def test_flat_model_mapping_form(maf):
    mm = maf.ensembles["maf-create-events"].model_mappings[0]
    assert (mm.component, mm.component_mode, mm.resource_context, mm.probability) == (
        "get-event-info", "normal", (("code-files", "normal"),), Decimal(".99"))


def test_register_event():
    m = load_text("(register-event 'save-file MafEditor \"saveFile\" '((String path)) "
                  ":static editor :output-type (boolean ok))")
    ev = m.registered_events["save-file"]
    assert (ev.java_class, ev.java_method, ev.params) == ("mafeditor", "saveFile", (("string", "path"),))
    assert ev.is_static_on == "editor" and ev.output_type == ("boolean", "ok")


@pytest.mark.parametrize("text, exc", [
    ("(define-thing x)", UnknownTopForm),
    ("42", UnknownTopForm),
    ("(defsplit s (x) (a (equal ?x 'a))) (defsplit s (x) (b (equal ?x 'b)))", DuplicateDefinition),
    ("(define-ensemble e) (define-ensemble e)", DuplicateDefinition),
    ("(defbehavior-model (c normal)) (defbehavior-model (c normal))", DuplicateDefinition),
    ("(defsplit s (x) (a (equal ?x 'a)) (a (equal ?x 'b)))", DuplicateDefinition),
    ("(define-ensemble e :inputs)", MalformedClause),
    ("(define-ensemble e :bogus ())", MalformedClause),
    ("(define-ensemble e :components ((a :type t :models (noromal))))", MalformedClause),
    ("(define-ensemble e :components ((a :type t :models (compromised))))", MalformedClause),
    ("(define-ensemble e :resources ((r t (normal 1.5))))", MalformedClause),
    ("(defbehavior-model (c sideways))", MalformedClause),
    ("(defbehavior-model (c normal) :prerequisites ([dscs ?x t bad]))", MalformedClause),
    ("(define-attack-model a :attack-types ((x .1) (x .2)))", DuplicateDefinition),
    ("(defrule r (:forward) if [and [resource ?e ?n ?r]] then "
     "[attack-implies-compromised-mode a ?other hacked .9])", MalformedClause),
])
def test_load_errors(text, exc):
    with pytest.raises(exc) as info:
        load_text(text)
    assert info.value.pos is not None or exc is UnknownTopForm


def test_fold_laws(maf_text):
    forms = sx.read_all(maf_text)
    empty = SamModel()
    assert load_model([]) == empty
    # cons law: loading f then the rest equals extending by f first
    first, rest = forms[0], forms[1:]
    assert load_model(forms) == load_model(rest, extend_model(empty, first))
    # reversed order yields the same model up to declaration order
    assert load_model(list(reversed(forms))) == load_model(forms)
