import os
import sys
import json
import time
import glob
import logging
import argparse
from dataclasses import dataclass, field
from typing import List, Optional

from tqdm import tqdm

from ir import IRSyntaxError, print_program, read_program, validate
from detector import ScafDetector, trace_upstream
from oracle import OracleConfig, OracleTransportError, build_oracle, jload
from pointsto import Mode, UnknownAllocatorError, analyze
from metrics import ProgramMismatchError, compare, icall_metrics
from benchgen import GenSpec, GenSpecError, GroundTruth, InterpretError, generate, interpret, score

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2
EXIT_TRANSPORT = 3


class ValidationFailed(ValueError):
    def __init__(self, path, violations):
        super().__init__(f"{path}: {len(violations)} violation(s)")
        self.violations = violations


@dataclass
class RunConfig:
    inputs: List[str] = field(default_factory=list, metadata={"help": "IR files or directories of .ir files."})
    oracle: Optional[OracleConfig] = field(default=None, metadata={"help": "The single active oracle; None disables it."})
    mode: Mode = field(default=Mode.ENHANCED, metadata={"help": "Analysis mode for `analyze`."})
    with_1ctx: bool = field(default=False, metadata={"help": "Add a one-callsite row to `compare`."})
    jobs: int = field(default=1, metadata={"help": "Worker threads per bottom-up layer."})
    trace_upstream: bool = field(default=False, metadata={"help": "List allocator-shaped callers of rejected functions."})
    out: Optional[str] = field(default=None, metadata={"help": "Report path; stdout when unset."})
    timers: bool = field(default=True, metadata={"help": "Emit the timing block."})

    def __post_init__(self):
        if not self.inputs:
            raise ValueError("no input given")
        if self.jobs < 1:
            raise ValueError(f"jobs must be at least 1, got {self.jobs}")

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        oracle = OracleConfig.from_flag(
            args.oracle,
            endpoint=args.endpoint,
            api_key=args.api_key,
            model=args.model,
            temperature=args.temperature,
            query_count=args.queries,
            timeout=args.timeout,
            retries=args.retries,
            max_in_flight=args.max_in_flight,
            cassette=args.cassette,
            cassette_mode=args.cassette_mode,
        )
        return cls(
            inputs=list(args.inputs),
            oracle=oracle,
            mode=Mode(args.mode),
            with_1ctx=args.with_1ctx,
            jobs=args.jobs,
            trace_upstream=args.trace_upstream,
            out=args.out,
            timers=not args.no_timing,
        )


def parse_config(argv=None):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--out', type=str, default=None, help='write the report here instead of stdout')
    common.add_argument('--verbose', action='store_true', help='debug logging')

    analysis = argparse.ArgumentParser(add_help=False)
    analysis.add_argument('inputs', nargs='+', help='IR file(s) or a directory of .ir files')
    analysis.add_argument('--oracle', type=str, default="conservative",
                          help='conservative | annotations=PATH | remote | none')
    analysis.add_argument('--endpoint', type=str, default=None, help='remote oracle base URL')
    analysis.add_argument('--api-key', type=str, default=None, help='remote oracle key')
    analysis.add_argument('--model', type=str, default="default", help='remote model name')
    analysis.add_argument('--temperature', type=float, default=0.6, help='0.4, 0.6 or 0.8')
    analysis.add_argument('--queries', type=int, default=5, help='completions per oracle query (odd)')
    analysis.add_argument('--timeout', type=float, default=120.0, help='per-request timeout in seconds')
    analysis.add_argument('--retries', type=int, default=2, help='transport retries per request')
    analysis.add_argument('--max-in-flight', type=int, default=4, help='concurrent remote requests')
    analysis.add_argument('--cassette', type=str, default=None, help='record/replay file')
    analysis.add_argument('--cassette-mode', type=str, default="off", choices=["off", "record", "replay"])
    analysis.add_argument('--mode', type=str, default="enhanced", choices=[m.value for m in Mode])
    analysis.add_argument('--with-1ctx', action='store_true', help='add the one-callsite row to compare')
    analysis.add_argument('--jobs', type=int, default=1, help='threads per bottom-up layer')
    analysis.add_argument('--trace-upstream', action='store_true', help='list callers above rejected functions')
    analysis.add_argument('--no-timing', action='store_true', help='omit the timing block')

    parser = argparse.ArgumentParser(prog="allocscope", description='custom allocator detection and heap modeling')
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help='parse and check IR') \
        .add_argument('inputs', nargs='+')
    for name, text in [("detect", "find side-effect-free allocators"),
                       ("analyze", "points-to analysis in one mode"),
                       ("compare", "metrics of enhanced against baseline"),
                       ("icalls", "indirect-call target refinement"),
                       ("score", "detection accuracy against a truth file")]:
        p = sub.add_parser(name, parents=[common, analysis], help=text)
        if name == "score":
            p.add_argument('--truth', type=str, required=True, help='ground-truth JSON written by gen')

    gen = sub.add_parser("gen", parents=[common], help='generate a labeled synthetic program')
    defaults = GenSpec()
    gen.add_argument('--seed', type=int, default=defaults.seed)
    gen.add_argument('--functions', type=int, default=defaults.functions)
    gen.add_argument('--depth', type=int, default=defaults.wrapper_chain_depth, help='wrapper chain depth')
    gen.add_argument('--side-effect-rate', type=float, default=defaults.side_effect_rate)
    gen.add_argument('--error-path-rate', type=float, default=defaults.error_path_rate)
    gen.add_argument('--icall-rate', type=float, default=defaults.icall_rate)
    gen.add_argument('--wrapper-rate', type=float, default=defaults.wrapper_rate)
    gen.add_argument('--break-at', type=int, default=None, help='chain level only the oracle can accept')
    gen.add_argument('--executable', action='store_true', help='restrict to the interpretable subset')
    gen.add_argument('--truth', type=str, default=None, help='ground-truth path; defaults next to --out')

    run = sub.add_parser("interpret", parents=[common], help='execute a program and dump observed facts')
    run.add_argument('inputs', nargs=1)
    run.add_argument('--entry', type=str, default=None)
    run.add_argument('--step-budget', type=int, default=10000)

    args = parser.parse_args(argv)
    return args


# --------------------------------------------------------------------------

def expand_inputs(inputs) -> List[str]:
    paths = []
    for item in inputs:
        if os.path.isdir(item):
            found = sorted(glob.glob(os.path.join(item, "*.ir")))
            if not found:
                raise FileNotFoundError(f"no .ir files in directory {item}")
            paths.extend(found)
        else:
            paths.append(item)
    return paths


def load_program(path):
    program = read_program(path)
    violations = validate(program)
    if violations:
        raise ValidationFailed(path, violations)
    return program


def _timing(start, phases, counters=None):
    block = {"TT": time.perf_counter() - start, "phases": phases}
    if counters is not None:
        block["LT"] = counters.latency
        block["AT/Q"] = counters.latency / counters.queries if counters.queries else None
    return block


def _detect(program, oracle_config, jobs, http_client=None) -> ScafDetector:
    oracle = build_oracle(oracle_config, http_client)
    detector = ScafDetector(program, oracle, jobs)
    try:
        detector.run()
    finally:
        if oracle is not None:
            oracle.close()
    return detector


def detect_one(path, config: RunConfig, http_client=None):
    start = time.perf_counter()
    program = load_program(path)
    loaded = time.perf_counter()
    detector = _detect(program, config.oracle, config.jobs, http_client)
    report = {"input": path, **detector.report()}
    if config.trace_upstream:
        rejected = [d.function for d in detector.decisions.values()
                    if not d.accepted and d.reason in ("side-effects", "oracle-not-ignorable")]
        report["upstream"] = trace_upstream(program, detector.al, rejected, detector.graph)
    if config.timers:
        report["timing"] = _timing(start, {"load": loaded - start, "detect": detector.elapsed}, detector.counters)
    return report


def _batch(paths, worker):
    if len(paths) == 1:
        return worker(paths[0])
    return {"programs": [worker(p) for p in tqdm(paths, desc="programs")]}


def run_detect(config: RunConfig, http_client=None):
    paths = expand_inputs(config.inputs)
    report = _batch(paths, lambda p: detect_one(p, config, http_client))
    if "programs" in report:
        totals = {"num1": 0, "num2": 0, "QN": 0, "IT": 0, "OT": 0}
        for item in report["programs"]:
            totals["num1"] += item["num1"]
            totals["num2"] += item["num2"]
            for key in ("QN", "IT", "OT"):
                totals[key] += item["oracle_counters"][key]
        report["totals"] = totals
    return report


def analyze_one(path, config: RunConfig, http_client=None):
    start = time.perf_counter()
    program = load_program(path)
    phases = {}
    al = None
    report = {"input": path}
    if config.mode == Mode.ENHANCED:
        detector = _detect(program, config.oracle, config.jobs, http_client)
        phases["detect"] = detector.elapsed
        al = detector.al
        report["allocators"] = al.to_json()
    tick = time.perf_counter()
    result = analyze(program, config.mode, al)
    phases["analyze"] = time.perf_counter() - tick
    report.update(result.to_json())
    if config.timers:
        report["timing"] = _timing(start, phases)
    return report


def run_analyze(config: RunConfig, http_client=None):
    return _batch(expand_inputs(config.inputs), lambda p: analyze_one(p, config, http_client))


def _row(strategy, baseline, result, detector=None):
    row = {
        "strategy": strategy,
        "metrics": compare(baseline, result, detector.al if detector is not None else None).to_json(),
        "icalls": icall_metrics(baseline.icall_targets, result.icall_targets).to_json(),
    }
    if detector is not None:
        row["num1"] = detector.al.num1
        row["num2"] = detector.al.num2
        row["allocators"] = detector.al.detected
    return row


def compare_one(path, config: RunConfig, http_client=None):
    start = time.perf_counter()
    program = load_program(path)
    phases = {}

    tick = time.perf_counter()
    baseline = analyze(program, Mode.BASELINE)
    phases["baseline"] = time.perf_counter() - tick
    rows = [_row("baseline", baseline, baseline)]

    heuristic = _detect(program, None, config.jobs)
    tick = time.perf_counter()
    rows.append(_row("heuristic", baseline, analyze(program, Mode.ENHANCED, heuristic.al), heuristic))
    phases["heuristic"] = heuristic.elapsed + time.perf_counter() - tick

    enhanced = _detect(program, config.oracle, config.jobs, http_client)
    tick = time.perf_counter()
    rows.append(_row("enhanced", baseline, analyze(program, Mode.ENHANCED, enhanced.al), enhanced))
    phases["enhanced"] = enhanced.elapsed + time.perf_counter() - tick

    if config.with_1ctx:
        tick = time.perf_counter()
        rows.append(_row("1ctx", baseline, analyze(program, Mode.ONE_CALLSITE)))
        phases["1ctx"] = time.perf_counter() - tick

    report = {"input": path, "rows": rows, "oracle_counters": enhanced.counters.to_json()}
    if config.timers:
        report["timing"] = _timing(start, phases, enhanced.counters)
    return report


def run_compare(config: RunConfig, http_client=None):
    return _batch(expand_inputs(config.inputs), lambda p: compare_one(p, config, http_client))


def icalls_one(path, config: RunConfig, http_client=None):
    program = load_program(path)
    detector = _detect(program, config.oracle, config.jobs, http_client)
    baseline = analyze(program, Mode.BASELINE)
    enhanced = analyze(program, Mode.ENHANCED, detector.al)
    return {
        "input": path,
        "report": icall_metrics(baseline.icall_targets, enhanced.icall_targets).to_json(),
        "baseline": {s: sorted(t) for s, t in sorted(baseline.icall_targets.items())},
        "enhanced": {s: sorted(t) for s, t in sorted(enhanced.icall_targets.items())},
    }


def run_icalls(config: RunConfig, http_client=None):
    return _batch(expand_inputs(config.inputs), lambda p: icalls_one(p, config, http_client))


def run_score(config: RunConfig, truth_path, http_client=None):
    truth = jload(truth_path)
    labels = truth.get("labels", truth)
    path = expand_inputs(config.inputs)[0]
    detector = _detect(load_program(path), config.oracle, config.jobs, http_client)
    result = score(detector.al.detected, GroundTruth(dict(labels)))
    return {"input": path, "allocators": detector.al.detected, **result}


def run_validate(paths):
    checked = []
    for path in expand_inputs(paths):
        program = load_program(path)
        checked.append({"input": path, "functions": len(program.functions), "violations": []})
    return checked[0] if len(checked) == 1 else {"programs": checked}


def run_gen(args):
    spec = GenSpec(seed=args.seed, functions=args.functions, wrapper_chain_depth=args.depth,
                   side_effect_rate=args.side_effect_rate, error_path_rate=args.error_path_rate,
                   icall_rate=args.icall_rate, executable_subset=args.executable,
                   wrapper_rate=args.wrapper_rate, break_at=args.break_at)
    program, truth = generate(spec)
    text = print_program(program)
    if args.out is None:
        return {"program": text, **truth.to_json()}
    with open(args.out, "w") as f:
        f.write(text)
    truth_path = args.truth or os.path.splitext(args.out)[0] + ".truth.json"
    with open(truth_path, "w") as f:
        json.dump(truth.to_json(), f, indent=2, sort_keys=True)
    return None


def run_interpret(args):
    program = load_program(args.inputs[0])
    return interpret(program, args.entry, args.step_budget).to_json()


def emit(report, out=None):
    text = json.dumps(report, indent=2, sort_keys=True)
    if out is None:
        print(text)
    else:
        with open(out, "w") as f:
            f.write(text + "\n")


def _fail(kind, message, code, **extra):
    payload = {"error": kind, "message": message, "exit_code": code, **extra}
    print(json.dumps(payload, indent=2, sort_keys=True), file=sys.stderr)
    return code


def dispatch(args, http_client=None):
    if args.command == "validate":
        return run_validate(args.inputs)
    if args.command == "gen":
        return run_gen(args)
    if args.command == "interpret":
        return run_interpret(args)
    config = RunConfig.from_args(args)
    if args.command == "detect":
        return run_detect(config, http_client)
    if args.command == "analyze":
        return run_analyze(config, http_client)
    if args.command == "compare":
        return run_compare(config, http_client)
    if args.command == "icalls":
        return run_icalls(config, http_client)
    return run_score(config, args.truth, http_client)


def main(args, http_client=None) -> int:
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        report = dispatch(args, http_client)
        if report is not None:
            emit(report, args.out)
    except OracleTransportError as exc:
        return _fail("oracle-transport", str(exc), EXIT_TRANSPORT)
    except ValidationFailed as exc:
        return _fail("validation", str(exc), EXIT_INVALID, violations=[v.to_json() for v in exc.violations])
    except IRSyntaxError as exc:
        return _fail("parse", str(exc), EXIT_INVALID, line=exc.line, column=exc.column)
    except (ProgramMismatchError, UnknownAllocatorError, GenSpecError, InterpretError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_INVALID)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_IO)
    except ValueError as exc:
        return _fail("config", str(exc), EXIT_INVALID)
    return EXIT_OK


if __name__ == "__main__":
    args = parse_config()
    sys.exit(main(args))
