"""Command-line interface: check, monitor, gen-trace and diagnose."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .check import ERROR, check_model
from .diagnosis import DiagnosisReport, Evidence, NoAttackModel, diagnose
from .loader import LoadError, load_text
from .monitor import ModelStaticError, Monitor, MonitorOptions, Verdict
from .sexpr import SexprError
from .trace import StreamDecodeError, iter_observations, to_jsonl
from .tracegen import (
    Fault, FaultNotApplicable, GenerationError, LoopBoundExceeded, Scenario,
    ScenarioIncomplete, inject, simulate,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_STATIC = 2
EXIT_COMPROMISED = 3


class UsageError(Exception):
    pass


class StaticError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1, not argparse's default 2 (reserved for model errors)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def create_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sammon", description="Load, lint and monitor system architectural models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("paths", nargs="*", metavar="PATH", help="model files (and, where noted, a trailing input file)")
        p.add_argument("-m", "--model", action="append", default=[], metavar="FILE",
                       help="model file; repeatable, concatenated in order")
        p.add_argument("--format", choices=("human", "json"), default="human")

    p = sub.add_parser("check", help="lint a model")
    common(p)

    p = sub.add_parser("monitor", help="check a trace against a model")
    common(p)
    p.add_argument("-t", "--trace", metavar="FILE",
                   help="trace file, '-' for stdin (default: the last PATH)")
    p.add_argument("--recursion-limit", type=int, default=1024, metavar="N")

    p = sub.add_parser("gen-trace", help="simulate a model and print a trace")
    common(p)
    p.add_argument("--scenario", metavar="FILE", help="scenario JSON (default: no split choices)")
    p.add_argument("--fault", metavar="KIND:INDEX", help="inject one fault into the trace")
    p.add_argument("--out", metavar="FILE", help="write the trace here instead of stdout")

    p = sub.add_parser("diagnose", help="posterior over attacks and resource modes")
    common(p)
    p.add_argument("--evidence", metavar="FILE",
                   help='evidence JSON {"observed_component_modes": {...}} (default: the last PATH)')
    return parser


# helpers --------------------------------------------------------------------------


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror if isinstance(exc, OSError) else exc}") from None


def _split_paths(args, trailing: str | None):
    """Model paths, plus the trailing input path when ``trailing`` names its flag."""
    paths = list(args.paths)
    extra = None
    if trailing is not None and getattr(args, trailing) is None:
        if not paths:
            raise UsageError(f"missing input file (give it last or with --{trailing})")
        extra = paths.pop()
    models = args.model + paths
    if not models:
        raise UsageError("no model files given")
    return models, extra


def _load(paths):
    text = "\n".join(_read(p) for p in paths)
    try:
        return load_text(text)
    except (SexprError, LoadError) as exc:
        raise StaticError(str(exc)) from None


def _color(code: str, text: str, stream) -> str:
    if os.environ.get("SAM_MONITOR_COLOR") == "0" or not stream.isatty():
        return text
    return f"\033[{code}m{text}\033[0m"


def _emit(obj, out):
    out.write(json.dumps(obj, sort_keys=True) + "\n")
    out.flush()


def _p(x: float) -> float:
    return float(f"{x:.12g}")


# commands ---------------------------------------------------------------------------


def cmd_check(args, out) -> int:
    models, _ = _split_paths(args, None)
    m = _load(models)
    findings = check_model(m)
    errors = sum(f.severity == ERROR for f in findings)
    warnings = len(findings) - errors
    if args.format == "json":
        for f in findings:
            _emit({"type": "finding", **f.to_json()}, out)
        _emit({"type": "summary", "errors": errors, "warnings": warnings}, out)
    else:
        for f in findings:
            code = "31" if f.severity == ERROR else "33"
            out.write(_color(code, str(f), out) + "\n")
        out.write(f"{errors} error(s), {warnings} warning(s)\n")
    return EXIT_STATIC if errors else EXIT_OK


def _step_json(s) -> dict:
    from .trace import to_json
    return {"type": "step", "index": s.index, "disposition": s.disposition,
            "instance": s.instance_id, "flag": s.flag, "mode": s.mode, "detail": s.detail,
            "observation": to_json(s.observation) if s.observation is not None else None}


def _report_json(r: DiagnosisReport) -> dict:
    return {"type": "diagnosis", **r.to_json()}


def _print_report(r: DiagnosisReport, out):
    out.write("diagnosis:" + ("" if r.recovered else " (no explanation found)") + "\n")
    for w in r.warnings:
        out.write(f"  warning: {w}\n")
    for a, p in sorted(r.attack_posteriors.items()):
        out.write(f"  P(attack {a}) = {_p(p)}\n")
    for (res, mode), p in sorted(r.resource_mode_posteriors.items()):
        out.write(f"  P({res} {mode}) = {_p(p)}\n")
    for a, p in r.ranked_assignments[:3]:
        desc = " ".join(f"{k}={v}" for k, v in sorted(a.items()))
        out.write(f"  {_p(p):<14} {desc}\n")


def cmd_monitor(args, out, stdin) -> int:
    models, trailing = _split_paths(args, "trace")
    trace_path = args.trace if args.trace is not None else trailing
    m = _load(models)
    if args.recursion_limit < 0:
        raise UsageError("--recursion-limit must be >= 0")
    try:
        mon = Monitor(m, MonitorOptions(recursion_limit=args.recursion_limit))
    except ModelStaticError as exc:
        raise StaticError(str(exc)) from None
    if trace_path == "-":
        lines = stdin
        handle = None
    else:
        try:
            handle = open(trace_path, encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read {trace_path}: {exc.strerror}") from None
        lines = handle
    try:
        for o in iter_observations(lines):
            step = mon.feed(o)
            if args.format == "json":
                _emit(_step_json(step), out)
            if mon.stopped:
                break
    except (StreamDecodeError, UnicodeDecodeError) as exc:
        raise UsageError(str(exc)) from None
    finally:
        if handle is not None:
            handle.close()
    v = mon.finish()
    _print_verdict(v, args.format, out)
    return EXIT_OK if v.outcome == "consistent" else EXIT_COMPROMISED


def _print_verdict(v: Verdict, fmt: str, out):
    bad = v.first_bad
    if fmt == "json":
        if bad is not None and bad.observation is None:
            _emit(_step_json(bad), out)
        _emit({"type": "verdict", "outcome": v.outcome, "steps": len(v.trail),
               "first_bad_index": bad.index if bad else None,
               "first_bad_disposition": bad.disposition if bad else None,
               "first_bad_instance": bad.instance_id if bad else None,
               "evidence": v.evidence, "warnings": v.warnings}, out)
        if v.diagnosis is not None:
            _emit(_report_json(v.diagnosis), out)
        return
    for w in v.warnings:
        out.write(_color("33", f"warning: {w}", out) + "\n")
    if bad is None:
        out.write(_color("32", f"consistent ({len(v.trail)} observations)", out) + "\n")
        return
    where = f"step {bad.index}"
    what = str(bad.observation) if bad.observation is not None else "end of stream"
    out.write(_color("31", f"compromised at {where}: {bad.disposition} {what} in {bad.instance_id}", out) + "\n")
    if bad.detail:
        out.write(f"  {bad.detail}\n")
    if v.diagnosis is not None:
        _print_report(v.diagnosis, out)


def cmd_gen_trace(args, out) -> int:
    models, _ = _split_paths(args, None)
    sc = Scenario()
    if args.scenario:
        try:
            sc = Scenario.from_json(json.loads(_read(args.scenario)))
        except (ValueError, TypeError, AttributeError) as exc:
            raise UsageError(f"bad scenario {args.scenario}: {exc}") from None
    fault = None
    if args.fault:
        try:
            fault = Fault.parse(args.fault)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    m = _load(models)
    if any(f.severity == ERROR for f in check_model(m)):
        raise StaticError("model has static errors; run check")
    try:
        gen = simulate(m, sc)
        obs = inject(gen, fault) if fault else gen.observations
    except (ScenarioIncomplete, LoopBoundExceeded, GenerationError, FaultNotApplicable) as exc:
        raise UsageError(f"cannot generate trace: {exc}") from None
    text = "".join(to_jsonl(o) + "\n" for o in obs)
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot write {args.out}: {exc.strerror}") from None
    else:
        out.write(text)
    return EXIT_OK


def cmd_diagnose(args, out) -> int:
    models, trailing = _split_paths(args, "evidence")
    path = args.evidence if args.evidence is not None else trailing
    try:
        data = json.loads(_read(path))
        observed = data["observed_component_modes"]
        if not isinstance(observed, dict):
            raise TypeError("observed_component_modes must be an object")
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"bad evidence {path}: {exc}") from None
    m = _load(models)
    try:
        report = diagnose(m, Evidence(observed))
    except NoAttackModel as exc:
        raise StaticError(str(exc)) from None
    except ValueError as exc:
        raise UsageError(f"bad evidence {path}: {exc}") from None
    if args.format == "json":
        _emit(_report_json(report), out)
    else:
        _print_report(report, out)
    return EXIT_OK


def main(argv=None, stdout=None, stdin=None) -> int:
    out = stdout or sys.stdout
    args = create_parser().parse_args(argv)
    try:
        if args.command == "check":
            return cmd_check(args, out)
        if args.command == "monitor":
            return cmd_monitor(args, out, stdin or sys.stdin)
        if args.command == "gen-trace":
            return cmd_gen_trace(args, out)
        return cmd_diagnose(args, out)
    except UsageError as exc:
        print(f"sammon: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StaticError as exc:
        print(f"sammon: {exc}", file=sys.stderr)
        return EXIT_STATIC
    except BrokenPipeError:
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
