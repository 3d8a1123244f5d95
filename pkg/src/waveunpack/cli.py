"""Command line driver: unpack | gen | check | decode."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .disasm import DecodeError, decode_one
from .scenario_gen import UnknownScenarioError, generate_scenario
from .taint_engine import MissingImageError
from .trace_model import TraceFormatError, parse_trace, write_trace


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="waveunpack",
        description="Rebuild PE32 files from whole-system instruction traces")
    sub = parser.add_subparsers(dest="command", required=True)

    p_unpack = sub.add_parser("unpack", help="run the full pipeline on a trace")
    p_unpack.add_argument("trace", help="trace file (JSON-Lines)")
    p_unpack.add_argument("-o", "--out", default="out", help="output directory")
    p_unpack.add_argument("--page-size", type=int, default=None,
                          help="override the trace header page size")
    p_unpack.add_argument("--strict-semantics", action="store_true",
                          help="exit 2 when wave semantics checks fail")
    p_unpack.add_argument("--no-patch", action="store_true",
                          help="emit PEs without rewriting call sites")
    p_unpack.add_argument("--report", default=None, help="report path")
    p_unpack.add_argument("--no-timing", action="store_true",
                          help="omit timing from the report")
    p_unpack.add_argument("--taint-log", default=None,
                          help="write a per-instruction taint debug log")

    p_gen = sub.add_parser("gen", help="generate a benchmark scenario trace")
    p_gen.add_argument("scenario", help="scenario id (d1-d4, c1, c2, c4, c5, m1)")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("-o", "--out", default=None,
                       help="trace path (default <id>.jsonl)")
    p_gen.add_argument("--truth", default=None,
                       help="expectations path (default <id>.truth.json)")

    p_check = sub.add_parser("check", help="verify a prior unpack output")
    p_check.add_argument("trace")
    p_check.add_argument("out")

    p_dec = sub.add_parser("decode", help="decode one subset instruction")
    p_dec.add_argument("hex", help="instruction bytes as hex")
    p_dec.add_argument("--vaddr", type=lambda s: int(s, 0), default=0)
    return parser


def cmd_unpack(args) -> int:
    try:
        trace = parse_trace(Path(args.trace).read_bytes())
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TraceFormatError as exc:
        print(f"error: {args.trace}: {exc}", file=sys.stderr)
        return 1
    if args.page_size:
        trace.page_size = args.page_size

    taint_log = open(args.taint_log, "w", encoding="utf-8") if args.taint_log else None
    try:
        result = pipeline.analyze(trace, patch=not args.no_patch,
                                  taint_log=taint_log)
    except MissingImageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if taint_log:
            taint_log.close()

    report = pipeline.write_outputs(result, args.out,
                                    no_timing=args.no_timing,
                                    report_path=args.report)
    summary = report["summary"]
    final = summary["final_wave"]
    print(f"procs={summary['procs']} waves={summary['waves']} "
          f"pe_files={summary['pe_files']}")
    if final:
        print(f"final wave: pid{final['pid']} wave{final['wave']} "
              f"api_calls={final['api_calls']} iat_size={final['iat_size']}")
    if result.violations:
        print(f"{len(result.violations)} wave semantics violation(s):")
        for v in result.violations:
            print(f"  {v}")
        if args.strict_semantics:
            return 2
    return 0


def cmd_gen(args) -> int:
    try:
        trace, truth = generate_scenario(args.scenario, args.seed)
    except UnknownScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    trace_path = Path(args.out or f"{args.scenario}.jsonl")
    truth_path = Path(args.truth or f"{args.scenario}.truth.json")
    trace_path.write_bytes(write_trace(trace))
    truth_path.write_text(json.dumps(truth.to_json(), indent=1, sort_keys=True)
                          + "\n", encoding="utf-8")
    print(f"wrote {trace_path} and {truth_path}")
    return 0


def cmd_check(args) -> int:
    try:
        trace = parse_trace(Path(args.trace).read_bytes())
        issues, violations = pipeline.check_outputs(trace, args.out)
    except (OSError, TraceFormatError, pipeline.CheckError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for issue in issues:
        print(f"integrity: {issue}")
    for violation in violations:
        print(f"violation: {violation}")
    if violations:
        print(f"{len(violations)} violation(s), {len(issues)} integrity issue(s)")
        return 2
    if issues:
        return 1
    print("OK, 0 violations")
    return 0


def cmd_decode(args) -> int:
    try:
        data = bytes.fromhex(args.hex.replace(" ", ""))
        ins = decode_one(data, args.vaddr)
    except (ValueError, DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    refs = []
    if ins.abs_ref is not None:
        refs.append(f"abs_ref=0x{ins.abs_ref:x}")
    if ins.rel_target is not None:
        refs.append(f"rel_target=0x{ins.rel_target:x}")
    print(f"{ins.text}  length={ins.length}" +
          ("  " + " ".join(refs) if refs else ""))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"unpack": cmd_unpack, "gen": cmd_gen,
                "check": cmd_check, "decode": cmd_decode}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
