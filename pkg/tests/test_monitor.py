from pathlib import Path

import pytest

from sammon.loader import load_text
from sammon.model import EventRef
from sammon.monitor import (
    CONSISTENT, D_ALLOWABLE, D_ENTRY, D_EXIT, D_POST_FAIL, D_PRE_FAIL, D_UNEXPECTED,
    ModelStaticError, Monitor, MonitorOptions, match_event, run_monitor,
)
from sammon.semantics import COMPLETED, READY, RUNNING, ObjectRef, Text, dscs_fact
from sammon.trace import (
    FactOp, Observation, StreamDecodeError, from_sexpr_line, read_trace, to_jsonl,
)
from sammon.tracegen import Scenario, SplitChoice, simulate

FIX = Path(__file__).parent / "fixtures"
OPTS = MonitorOptions(diagnose=False)
W = ObjectRef("w1")
GOOD = FactOp("assert", dscs_fact(W, "widget", "good"))


@pytest.fixture(scope="module")
def pipe():
    return load_text((FIX / "pipeline.sam").read_text())


def good_pipeline():
    return [Observation("make", "entry", (), 1, 1),
            Observation("tick", "entry", (), 1, 2),
            Observation("make", "exit", (W,), 1, 3, (GOOD,)),
            Observation("use", "entry", (), 1, 4),
            Observation("use", "exit", (), 1, 5)]


def save_only(maf):
    sc = Scenario((SplitChoice("more-events?", value="save-mission"),))
    return simulate(maf, sc).observations


# matching -------------------------------------------------------------------


def test_match_event_by_name_tag_and_arity():
    refs = (EventRef("set-initial-info", "exit", ("the-model", None)), EventRef("set-initial-info", "entry"))
    assert match_event(Observation("set-initial-info", "exit", (W, W)), refs) == refs[0]
    assert match_event(Observation("set-initial-info", "exit", (W,)), refs) is None
    assert match_event(Observation("set-initial-info", "entry", (W,)), refs) == refs[1]
    assert match_event(Observation("startup", "entry"), (EventRef("startup"),)) == EventRef("startup")
    assert match_event(Observation("startup", "exit"), (EventRef("startup"),)) == EventRef("startup")
    assert match_event(Observation("other", "exit"), (EventRef("startup"),)) is None


# whole-stream behavior ------------------------------------------------------------


def test_good_pipeline_is_consistent(pipe):
    v = run_monitor(pipe, good_pipeline(), OPTS)
    assert v.outcome == CONSISTENT
    assert [s.disposition for s in v.trail] == [D_ENTRY, D_ALLOWABLE, D_EXIT, D_ENTRY, D_EXIT]
    assert v.first_bad is None and v.evidence == {}


def test_data_propagates_to_consumer(pipe):
    mon = Monitor(pipe, OPTS)
    for o in good_pipeline()[:3]:
        mon.feed(o)
    b = next(i for i in mon.instances if i.id == "pipeline/b")
    assert b.input_ports == {"x": W}


def test_empty_stream_is_compromised(pipe):
    v = run_monitor(pipe, [], OPTS)
    assert v.outcome == "compromised"
    bad = v.first_bad
    assert bad.index == 0 and bad.observation is None and bad.disposition == D_UNEXPECTED
    assert bad.instance_id == "pipeline"


def test_truncated_stream(pipe):
    v = run_monitor(pipe, good_pipeline()[:4], OPTS)
    assert v.first_bad.index == 4


def test_unpredicted_event_while_running(pipe):
    obs = good_pipeline()
    obs.insert(1, Observation("rogue", "entry"))
    v = run_monitor(pipe, obs, OPTS)
    assert v.first_bad.index == 1
    assert v.first_bad.disposition == D_UNEXPECTED
    assert v.first_bad.instance_id == "pipeline/a"


def test_exit_before_entry_is_unexpected(pipe):
    obs = good_pipeline()
    obs[3], obs[4] = obs[4], obs[3]
    v = run_monitor(pipe, obs, OPTS)
    assert v.first_bad.index == 3 and v.first_bad.instance_id == "pipeline/b"


def test_missing_postcondition(pipe):
    obs = good_pipeline()
    o = obs[2]
    obs[2] = Observation(o.event, o.tag, o.args, o.pid, o.ts)
    v = run_monitor(pipe, obs, OPTS)
    assert v.first_bad.index == 2
    assert v.first_bad.disposition == D_POST_FAIL
    assert v.first_bad.instance_id == "pipeline/a"


def test_precondition_failure_after_retraction(pipe):
    obs = good_pipeline()
    obs[3] = Observation("use", "entry", (), 1, 4, (FactOp("retract", GOOD.fact),))
    v = run_monitor(pipe, obs, OPTS)
    assert v.first_bad.index == 3
    assert v.first_bad.disposition == D_PRE_FAIL
    assert v.first_bad.instance_id == "pipeline/b"


def test_missing_output_port(pipe):
    obs = good_pipeline()
    obs[2] = Observation("make", "exit", (), 1, 3, (GOOD,))
    v = run_monitor(pipe, obs, OPTS)
    assert v.outcome == "compromised"


def test_stops_after_first_bad(pipe):
    mon = Monitor(pipe, OPTS)
    assert mon.feed(Observation("rogue", "entry")).is_bad
    assert mon.feed(good_pipeline()[0]) is None
    assert len(mon.finish().trail) == 1


def test_observation_after_completion(pipe):
    v = run_monitor(pipe, good_pipeline() + [Observation("make", "entry")], OPTS)
    assert v.first_bad.index == 5


def test_lifecycle_is_monotone(maf):
    v = run_monitor(maf, save_only(maf), OPTS)
    assert v.outcome == CONSISTENT
    order = {READY: 0, RUNNING: 1, COMPLETED: 2}
    seen = {}
    for inst, flag in v.transitions:
        if flag in order:
            assert order[flag] > seen.get(inst, -1), (inst, flag)
            seen[inst] = order[flag]
    assert seen["maf-editor"] == 2


def test_prefix_determinism(maf):
    obs = save_only(maf)
    full = run_monitor(maf, obs, OPTS).trail
    for k in range(len(obs)):
        mon = Monitor(maf, OPTS)
        steps = [mon.feed(o) for o in obs[:k]]
        assert steps == full[:k]


def test_save_mission_takes_exit_branch(maf):
    v = run_monitor(maf, save_only(maf), OPTS)
    ids = {i for i, f in v.transitions if f == COMPLETED}
    assert "maf-editor/save" in ids
    assert not any("build-event" in i for i in ids)


def test_evidence_and_diagnosis(maf):
    obs = save_only(maf)
    obs.insert(2, Observation("rogue", "entry"))
    v = run_monitor(maf, obs)
    assert v.first_bad.instance_id == "maf-editor/startup"
    assert v.evidence == {"maf-editor/startup": "compromised"}
    assert v.diagnosis is not None and v.diagnosis.recovered
    assert set(v.diagnosis.attack_posteriors) == {"hacked-image-file-attack", "hacked-code-file-attack"}


def test_recursion_limit(maf):
    sc = Scenario((SplitChoice("more-events?", value="new-event"), SplitChoice("takeoff?", branch="exit"),
                   SplitChoice("more-events?", value="new-event"), SplitChoice("takeoff?", branch="exit"),
                   SplitChoice("more-events?", value="save-mission")), loop_bound=4)
    obs = simulate(maf, sc).observations
    assert run_monitor(maf, obs, OPTS).outcome == CONSISTENT
    v = run_monitor(maf, obs, MonitorOptions(recursion_limit=1, diagnose=False))
    assert v.outcome == "compromised"
    assert "depth exceeds the limit of 1" in v.first_bad.detail


def test_pid_and_timestamp_warnings(pipe):
    obs = good_pipeline()
    obs[1] = Observation("tick", "entry", (), 2, 0)
    v = run_monitor(pipe, obs, OPTS)
    assert v.outcome == CONSISTENT
    assert any("process id" in w for w in v.warnings)
    assert any("timestamp" in w for w in v.warnings)


def test_static_errors_refused():
    m = load_text("(define-ensemble top :entry-events :auto :components ((a :type nowhere)))")
    with pytest.raises(ModelStaticError):
        Monitor(m)


def test_jsonl_round_trip(pipe):
    obs = good_pipeline()
    text = "".join(to_jsonl(o) + "\n" for o in obs)
    assert read_trace(text) == obs


def test_sexpr_trace_lines():
    o = from_sexpr_line('(Retrieve-Leg exit (nil "L1" 3) 77 12)')
    assert o.event == "retrieve-leg" and o.tag == "exit" and o.pid == 77 and o.ts == 12
    assert o.args[1] == Text("L1")
    assert read_trace("; comment\n\n(startup entry ())\n") == [Observation("startup", "entry")]


@pytest.mark.parametrize("line", [
    "{not json", '{"tag": "entry"}', '{"event": "x", "tag": "middle"}',
    '{"event": "x", "tag": "entry", "args": [true]}', "(x sideways ())", "(x entry",
])
def test_decode_errors_name_the_line(line):
    with pytest.raises(StreamDecodeError) as info:
        read_trace('{"event": "ok", "tag": "entry"}\n' + line)
    assert info.value.line == 2
