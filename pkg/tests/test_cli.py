import io
import json
import subprocess
import sys

import pytest

from sammon.cli import main

SAVE_SCENARIO = {"splits": [{"at": "more-events?", "value": "save-mission"}]}


def run(argv, stdin=None):
    out = io.StringIO()
    code = main(argv, stdout=out, stdin=stdin)
    return code, out.getvalue()


def jsonl(text):
    return [json.loads(line) for line in text.splitlines()]


@pytest.fixture
def trace_file(tmp_path, maf_path):
    sc = tmp_path / "sc.json"
    sc.write_text(json.dumps(SAVE_SCENARIO))
    out = tmp_path / "t.jsonl"
    assert run(["gen-trace", maf_path, "--scenario", str(sc), "--out", str(out)])[0] == 0
    return out


def test_check_json(maf_path):
    code, text = run(["check", "--format", "json", maf_path])
    assert code == 0
    recs = jsonl(text)
    assert sum(r["code"] == "ProbSum" for r in recs if r["type"] == "finding") == 12
    assert recs[-1] == {"type": "summary", "errors": 0, "warnings": len(recs) - 1}


def test_check_human(maf_path):
    code, text = run(["check", "-m", maf_path])
    assert code == 0 and "0 error(s)" in text and "\033[" not in text


def test_check_static_error(tmp_path, capsys):
    bad = tmp_path / "bad.sam"
    bad.write_text("(define-ensemble top :entry-events :auto :components ((a :type nowhere)))")
    assert run(["check", str(bad)])[0] == 2
    bad.write_text("(define-ensemble top")
    assert run(["check", str(bad)])[0] == 2
    assert "1:1" in capsys.readouterr().err


def test_gen_trace_then_monitor(maf_path, trace_file):
    code, text = run(["monitor", maf_path, str(trace_file)])
    assert code == 0 and text.startswith("consistent")
    code, text = run(["monitor", "--format", "json", "-m", maf_path, "-t", str(trace_file)])
    recs = jsonl(text)
    assert code == 0
    assert {r["type"] for r in recs} == {"step", "verdict"}
    assert recs[-1]["outcome"] == "consistent"


def test_monitor_compromised(maf_path, tmp_path, trace_file):
    lines = trace_file.read_text().splitlines()
    lines.insert(2, json.dumps({"event": "rogue", "tag": "entry"}))
    t = tmp_path / "bad.jsonl"
    t.write_text("\n".join(lines) + "\n")
    code, text = run(["monitor", "--format", "json", maf_path, str(t)])
    assert code == 3
    recs = jsonl(text)
    verdict = next(r for r in recs if r["type"] == "verdict")
    assert verdict["first_bad_index"] == 2 and verdict["outcome"] == "compromised"
    diag = recs[-1]
    assert diag["type"] == "diagnosis"
    for p in diag["attack_posteriors"].values():
        assert p == float(f"{p:.12g}")
    code, text = run(["monitor", maf_path, str(t)])
    assert code == 3 and "compromised at step 2" in text and "P(attack" in text


class OneLineAtATime:
    """Stdin stand-in that records how far it has been read."""

    def __init__(self, lines):
        self.lines = list(lines)
        self.read = 0

    def __iter__(self):
        for line in self.lines:
            self.read += 1
            yield line


def test_monitor_stdin_stops_at_first_bad(maf_path, trace_file):
    lines = trace_file.read_text().splitlines(keepends=True)
    lines.insert(1, '{"event": "rogue", "tag": "entry"}\n')
    src = OneLineAtATime(lines)
    code, _ = run(["monitor", "-m", maf_path, "-t", "-"], stdin=src)
    assert code == 3
    assert src.read == 2  # nothing past the offending line was consumed


def test_fault_flag(maf_path, tmp_path):
    sc = tmp_path / "sc.json"
    sc.write_text(json.dumps(SAVE_SCENARIO))
    code, text = run(["gen-trace", maf_path, "--scenario", str(sc), "--fault", "inject-unexpected:0"])
    assert code == 0 and json.loads(text.splitlines()[0])["event"] == "rogue-event"
    assert run(["gen-trace", maf_path, "--scenario", str(sc), "--fault", "drop-exit:0"])[0] == 1
    assert run(["gen-trace", maf_path, "--fault", "bogus"])[0] == 1
    assert run(["gen-trace", maf_path])[0] == 1  # no scenario for the splits


def test_diagnose(maf_path, tmp_path):
    ev = tmp_path / "ev.json"
    ev.write_text(json.dumps({"observed_component_modes": {"maf-editor/save": "compromised"}}))
    code, text = run(["diagnose", "--format", "json", maf_path, str(ev)])
    assert code == 0
    (rec,) = jsonl(text)
    assert rec["type"] == "diagnosis" and rec["recovered"]
    ev.write_text("{}")
    assert run(["diagnose", maf_path, str(ev)])[0] == 1


def test_io_and_usage_errors(maf_path, capsys):
    assert run(["check", "/nonexistent.sam"])[0] == 1
    assert "cannot read /nonexistent.sam" in capsys.readouterr().err
    assert run(["monitor", maf_path, "/nonexistent.jsonl"])[0] == 1
    assert run(["monitor"])[0] == 1
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1


def test_bad_trace_line(maf_path, tmp_path, capsys):
    t = tmp_path / "t.jsonl"
    t.write_text('{"event": "startup", "tag": "entry"}\nnot json\n')
    assert run(["monitor", maf_path, str(t)])[0] == 1
    assert "trace line 2" in capsys.readouterr().err


def test_color_can_be_disabled(maf_path, monkeypatch):
    class Tty(io.StringIO):
        def isatty(self):
            return True

    out = Tty()
    main(["check", maf_path], stdout=out)
    assert "\033[33m" in out.getvalue()
    monkeypatch.setenv("SAM_MONITOR_COLOR", "0")
    out = Tty()
    main(["check", maf_path], stdout=out)
    assert "\033[" not in out.getvalue()


def test_console_entry_point(maf_path):
    p = subprocess.run([sys.executable, "-m", "sammon.cli", "check", maf_path],
                       capture_output=True, text=True)
    assert p.returncode == 0 and "0 error(s)" in p.stdout
