from decimal import Decimal

import pytest

from sammon.model import And, Dscs, Not, Or, SpecialFn
from sammon.semantics import (
    Bottom, BottomStateError, COMPLETED, EMPTY_ENV, FactStore, Nil, NoBranchTaken, Number,
    ObjectRef, PredicateRegistry, READY, RUNNING, RtState, Text, Tuple, UnboundIdentifier,
    UnboundVariable, UnknownPredicate, UnknownSnapshot, AmbiguousSplit, conditions_hold,
    dscs_fact, env_push, eq_flag, eq_mode, equals, eval_condition, eval_split, fact_predicate,
    map_entry_fact, member_of, registry_for_model, set_flag, set_mode, state_update, take,
)
from sammon.loader import load_text

MODEL = ObjectRef("m1")
EVENT = ObjectRef("e1")


def test_env_push_and_shadow():
    e = env_push(EMPTY_ENV, "x", Number(Decimal(1)))
    e = env_push(e, "y", Text("a"))
    e2 = env_push(e, "x", Text("b"))
    assert e2.lookup("x") == Text("b")
    assert e2.lookup("y") == Text("a")
    assert e.lookup("x") == Number(Decimal(1))
    assert e2.location("x") != e.location("x")
    with pytest.raises(UnboundIdentifier):
        e.lookup("z")


def test_take_gives_fresh_locations():
    locs, e = take(EMPTY_ENV, 3)
    assert locs == (0, 1, 2) and e.space == 3
    more, _ = take(e, 2)
    assert set(more).isdisjoint(locs)


def test_flag_and_mode_are_independent():
    s = RtState()
    assert eq_flag(s, READY) and eq_mode(s, "normal")
    s = set_mode(set_flag(s, RUNNING), "compromised")
    assert eq_flag(s, RUNNING) and eq_mode(s, "compromised")
    assert eq_mode(set_flag(s, COMPLETED), "compromised")
    with pytest.raises(ValueError):
        set_flag(s, "paused")


def test_bottom_absorbs():
    assert set_flag(Bottom, RUNNING) is Bottom
    assert set_mode(Bottom, "normal") is Bottom
    assert not eq_flag(Bottom, READY)
    with pytest.raises(BottomStateError):
        state_update(Bottom, 0, Nil)


def test_state_update_frame():
    s = state_update(RtState(), 0, Text("a"))
    s2 = state_update(s, 1, Text("b"))
    assert s2.read(0) == Text("a") and s2.read(1) == Text("b")
    assert 1 not in s.store


def test_values():
    assert equals(Tuple((Text("a"), Nil)), Tuple((Text("a"), Nil)))
    assert not equals(Text("1"), Number(Decimal(1)))
    assert member_of("events", MODEL) == Tuple((Text("events"), MODEL))


def test_dscs_conditions():
    facts = FactStore([dscs_fact(MODEL, "mission-builder", "good")])
    b = {"the-model": MODEL}
    assert eval_condition(Dscs("the-model", "mission-builder", "good"), b, facts)
    assert not eval_condition(Not(Dscs("the-model", "mission-builder", "good")), b, facts)
    assert eval_condition(Dscs("the-model", "mission-builder"), b, facts)
    assert not eval_condition(Dscs("the-model", "mission-builder", "bad"), b, facts)
    assert eval_condition(Or((Dscs("the-model", "x"), Dscs("the-model", "mission-builder"))), b, facts)
    assert not eval_condition(And((Dscs("the-model", "x"), Dscs("the-model", "mission-builder"))), b, facts)
    assert conditions_hold([], {}, FactStore())


def test_unbound_variable():
    with pytest.raises(UnboundVariable):
        eval_condition(Dscs("nobody", "t", "good"), {}, FactStore())


def test_add_to_map_reads_before_snapshot(maf):
    post = maf.behavior("maf-add-event-to-model").postconditions[0]
    b = {"the-model": MODEL, "event-number": Number(Decimal(1)), "the-event": EVENT}
    entry = map_entry_fact(member_of("events", MODEL), Number(Decimal(1)), EVENT)
    facts = FactStore()
    facts.snapshot("maf-add-event-to-model")
    assert not eval_condition(post, b, facts)  # not yet in the live store
    facts.assert_fact(entry)
    assert eval_condition(post, b, facts)  # added since the snapshot
    facts.snapshot("maf-add-event-to-model")
    assert not eval_condition(post, b, facts)  # already there before
    # an explicit base label overrides the one named by the marker
    facts2 = FactStore([entry])
    facts2.snapshot("call-7")
    facts2.snapshot("maf-add-event-to-model")
    assert not eval_condition(post, b, facts2, situation_base="call-7")


def test_missing_snapshot():
    c = SpecialFn("add-to-map", ("m", "k", "v"), ("before", "x"))
    b = {"m": MODEL, "k": Nil, "v": Nil}
    with pytest.raises(UnknownSnapshot):
        eval_condition(c, b, FactStore())


def test_unknown_predicate_is_strict():
    c = SpecialFn("mystery", ("x",), None)
    with pytest.raises(UnknownPredicate):
        eval_condition(c, {"x": Nil}, FactStore())
    reg = PredicateRegistry.with_builtins()
    reg.register("mystery", fact_predicate("mystery"))
    facts = FactStore([("mystery", Nil)])
    assert eval_condition(c, {"x": Nil}, facts, registry=reg)


def test_more_events_split(maf):
    sm = maf.splits["maf-more-events?"]
    assert eval_split(sm, [Text("new-event")]) == "build-event"
    assert eval_split(sm, [Text("save-mission")]) == "exit"
    with pytest.raises(NoBranchTaken):
        eval_split(sm, [Text("quit")])


def test_takeoff_split_uses_model_predicates(maf):
    sm = maf.splits["maf-takeoff?"]
    reg = registry_for_model(maf)
    assert "take-off-event?" in reg
    with pytest.raises(UnknownPredicate):
        eval_split(sm, [EVENT])
    facts = FactStore([("take-off-event?", EVENT)])
    assert eval_split(sm, [EVENT], reg, facts) == "get-additional-info"
    assert eval_split(sm, [EVENT], reg, FactStore()) == "exit"


def test_ambiguous_split():
    m = load_text("(defsplit s (x) (a (equal ?x 'y)) (b (not nil)))")
    with pytest.raises(AmbiguousSplit):
        eval_split(m.splits["s"], [Text("y")])
