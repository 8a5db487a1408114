"""Command-line front end for validation runs, benchmarks, and reports.

Exit code contract, shared by every subcommand:
  0  success (exploit confirmed / requested output produced)
  1  exploit not confirmed
  2  usage or input error (unknown flags included)
  3  infrastructure error (unreachable target, backend failure, reset failure)
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Optional, Tuple

from .domain import (
    ExecutionTrace,
    ManifestError,
    RunMode,
    TargetManifest,
    TraceError,
    manifest_to_json,
    parse_target_manifest,
)
from .engine import (
    Budgets,
    EngineError,
    KnowledgeStore,
    run_exploitation,
    run_single_agent,
)
from .evaluator import CallbackListener
from .fixtures.runner import FIXTURE_NAMES, start_fixture, stop_fixture
from .harness import (
    AnnotationError,
    FailureAnnotation,
    HarnessError,
    ResetError,
    annotate_failure,
    load_manifest_set,
    load_records,
    persist_run_artifacts,
    reset_target,
    run_benchmark,
)
from .llm import BackendConfig, BackendError
from .metrics import MetricsError, build_report
from .poc import PoCReport, poc_from_dict, replay_poc, validate_poc
from .recon import ReconError, discover_endpoints, is_live
from .sandbox import create_env

EXIT_OK = 0
EXIT_NOT_CONFIRMED = 1
EXIT_USAGE = 2
EXIT_INFRA = 3

_MODES = {
    "greybox-multi": RunMode.GREYBOX_MULTI,
    "greybox-single": RunMode.GREYBOX_SINGLE,
    "blackbox": RunMode.BLACKBOX_MULTI,
}


class _InputError(Exception):
    """Bad file or value discovered after argument parsing; maps to exit 2."""


def _fail(code: int, message: str) -> int:
    print(message, file=sys.stderr)
    return code


def _positive_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from None
    if number < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return number


def _listener_spec(value: str) -> Tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {value!r}")
    return host, int(port)


def _start_listener(spec: Optional[Tuple[str, int]]) -> Optional[CallbackListener]:
    if spec is None:
        return None
    host, port = spec
    return CallbackListener(host=host, port=port)


def _load_manifest(path: Path) -> TargetManifest:
    if not path.is_file():
        raise _InputError(f"manifest not found: {path}")
    try:
        return parse_target_manifest(path.read_bytes())
    except (ManifestError, ValueError) as exc:
        raise _InputError(f"bad manifest: {exc}") from exc


def _backend_config(args: argparse.Namespace) -> BackendConfig:
    try:
        return BackendConfig(mode=args.backend, cassette_path=args.cassette)
    except ValueError as exc:
        raise _InputError(str(exc)) from exc


def _load_poc(path: Path) -> PoCReport:
    if not path.is_file():
        raise _InputError(f"poc report not found: {path}")
    try:
        return poc_from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise _InputError(f"bad poc report: {exc}") from exc


def _load_trace(path: Path) -> ExecutionTrace:
    """Read a persisted attempt artifact ({"run_id", "events": [...]})."""
    if not path.is_file():
        raise _InputError(f"trace not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        lines = "\n".join(json.dumps(e) for e in doc["events"])
        return ExecutionTrace.from_ndjson(str(doc["run_id"]), lines)
    except (json.JSONDecodeError, KeyError, TypeError, TraceError, ValueError) as exc:
        raise _InputError(f"bad trace: {exc}") from exc


def _emit(args: argparse.Namespace, doc: dict, text_lines: list[str]) -> None:
    if args.output == "json":
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        for line in text_lines:
            print(line)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        manifest = _load_manifest(args.manifest)
        config = _backend_config(args)
    except _InputError as exc:
        return _fail(EXIT_USAGE, str(exc))
    mode = _MODES[args.mode] if args.mode else None
    budgets = Budgets(max_attempts=args.max_attempts)
    try:
        listener = _start_listener(args.listener)
    except OSError as exc:
        return _fail(EXIT_INFRA, f"listener: {exc}")

    run_dir = Path("runs") / manifest.target_id / "run1"
    try:
        if manifest.reset_hook:
            reset_target(manifest)
        endpoints = None
        if args.wordlist is not None:
            endpoints = discover_endpoints(
                manifest.base_url, args.wordlist, cache_dir=Path("runs") / "recon"
            )
        listener_url = listener.url if listener else ""

        def env_factory(m):
            return create_env(m, listener_url=listener_url)

        single = mode is RunMode.GREYBOX_SINGLE or (
            mode is None and manifest.mode is RunMode.GREYBOX_SINGLE
        )
        if single:
            sink: list = []
            record = run_single_agent(
                manifest,
                budgets,
                config,
                env_factory,
                store=KnowledgeStore(Path("runs") / "knowledge"),
                listener=listener,
                trace_sink=sink,
            )
            traces, poc, context = sink, None, None
        else:
            ctx: list = []
            record, traces, poc = run_exploitation(
                manifest,
                budgets,
                config,
                env_factory,
                mode=mode,
                endpoints=endpoints,
                listener=listener,
                context_sink=ctx,
            )
            context = ctx[0] if ctx else None
        persist_run_artifacts(run_dir, record, traces, poc, context)
    except (ResetError, ReconError, EngineError, BackendError) as exc:
        return _fail(EXIT_INFRA, f"error: {exc}")
    finally:
        if listener is not None:
            listener.close()

    poc_path = str(run_dir / "poc.md") if poc is not None else None
    if record.success:
        lines = [
            f"{record.target_id} run {record.run_index}: exploit confirmed "
            f"(tca={record.tca}, attempts={record.attempts_used})"
        ]
    elif record.infrastructure_failure:
        lines = [f"{record.target_id} run {record.run_index}: infrastructure failure"]
    else:
        lines = [
            f"{record.target_id} run {record.run_index}: exploit not confirmed "
            f"(attempts={record.attempts_used})"
        ]
    if record.failure_reason:
        lines.append(f"reason: {record.failure_reason}")
    if poc_path:
        lines.append(f"poc: {poc_path}")
    lines.append(f"artifacts: {run_dir}")
    _emit(
        args,
        {**record.to_dict(), "poc_path": poc_path, "artifacts_dir": str(run_dir)},
        lines,
    )
    if record.infrastructure_failure:
        return EXIT_INFRA
    return EXIT_OK if record.success else EXIT_NOT_CONFIRMED


def _cmd_bench(args: argparse.Namespace) -> int:
    try:
        manifests = load_manifest_set(args.manifest)
        config = _backend_config(args)
    except (HarnessError, _InputError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    mode = _MODES[args.mode] if args.mode else None
    budgets = Budgets(max_attempts=args.max_attempts)
    output_dir = Path("runs")
    records_path = args.records if args.records else output_dir / "records.ndjson"
    cassette = args.cassette
    cassette_dir = cassette if cassette is not None and cassette.is_dir() else None
    try:
        listener = _start_listener(args.listener)
    except OSError as exc:
        return _fail(EXIT_INFRA, f"listener: {exc}")
    try:
        path = run_benchmark(
            manifests,
            args.runs,
            budgets,
            config,
            mode,
            output_dir=output_dir,
            records_path=records_path,
            listener=listener,
            wordlist=args.wordlist,
            cassette_dir=cassette_dir,
        )
        records = load_records(path)
    except HarnessError as exc:
        return _fail(EXIT_USAGE, str(exc))
    finally:
        if listener is not None:
            listener.close()
    succeeded = sum(1 for r in records if r.success)
    infra = sum(1 for r in records if r.infrastructure_failure)
    _emit(
        args,
        {
            "records_path": str(path),
            "runs": len(records),
            "succeeded": succeeded,
            "infrastructure_failures": infra,
        },
        [
            f"bench complete: {len(records)} runs, {succeeded} succeeded, "
            f"{infra} infrastructure failures",
            f"records: {path}",
        ],
    )
    if records and infra == len(records):
        return EXIT_INFRA
    return EXIT_OK if succeeded else EXIT_NOT_CONFIRMED


def _cmd_metrics(args: argparse.Namespace) -> int:
    try:
        records = load_records(args.records)
        report = build_report(records, max_attempts=args.max_attempts)
    except (HarnessError, MetricsError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    if args.output == "json":
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK

    def rate(value: Optional[float]) -> str:
        return "n/a" if value is None else f"{value:.3f}"

    rows = [
        ("SR", rate(report.sr)),
        ("Success@1", rate(report.success_at_k.get(1))),
        ("Success@5", rate(report.success_at_k.get(5))),
        ("AvgTCA", "n/a" if report.avg_tca is None else f"{report.avg_tca:.2f}"),
        ("SE", rate(report.se)),
    ]
    width = max(len(label) for label, _ in rows)
    for label, value in rows:
        print(f"{label:<{width}}  {value}")
    return EXIT_OK


def _cmd_poc_validate(args: argparse.Namespace) -> int:
    try:
        report = _load_poc(args.poc)
        trace = _load_trace(args.trace) if args.trace else None
    except _InputError as exc:
        return _fail(EXIT_USAGE, str(exc))
    check = validate_poc(report, trace)
    doc = {
        "has_oracle": check.has_oracle,
        "has_steps": check.has_steps,
        "trace_consistent": check.trace_consistent,
        "ok": check.all_true,
    }
    _emit(
        args,
        doc,
        [
            f"has_oracle: {'true' if check.has_oracle else 'false'}",
            f"has_steps: {'true' if check.has_steps else 'false'}",
            f"trace_consistent: {'true' if check.trace_consistent else 'false'}",
            f"poc quality: {'ok' if check.all_true else 'degraded'}",
        ],
    )
    return EXIT_OK if check.all_true else EXIT_NOT_CONFIRMED


def _cmd_poc_replay(args: argparse.Namespace) -> int:
    try:
        report = _load_poc(args.poc)
        manifest = _load_manifest(args.manifest)
    except _InputError as exc:
        return _fail(EXIT_USAGE, str(exc))
    if not is_live(manifest.base_url):
        return _fail(EXIT_INFRA, f"target not reachable at {manifest.base_url}")
    try:
        listener = _start_listener(args.listener)
    except OSError as exc:
        return _fail(EXIT_INFRA, f"listener: {exc}")
    try:
        if manifest.reset_hook:
            reset_target(manifest)
    except ResetError as exc:
        if listener is not None:
            listener.close()
        return _fail(EXIT_INFRA, f"reset failed: {exc}")
    env = create_env(manifest, listener_url=listener.url if listener else "")
    diagnostics: list[str] = []
    try:
        confirmed = replay_poc(
            report,
            env,
            manifest.oracle,
            diagnostics,
            listener_bodies=(listener.evidence_text if listener else None),
        )
    finally:
        env.destroy()
        if listener is not None:
            listener.close()
    lines = [f"replay: {'confirmed' if confirmed else 'not confirmed'}"]
    lines += [f"  - {note}" for note in diagnostics]
    _emit(args, {"confirmed": confirmed, "diagnostics": diagnostics}, lines)
    return EXIT_OK if confirmed else EXIT_NOT_CONFIRMED


def _wait_for_interrupt(handle) -> None:
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass


def _cmd_fixture(args: argparse.Namespace) -> int:
    try:
        listener = _start_listener(args.listener)
    except OSError as exc:
        return _fail(EXIT_INFRA, f"listener: {exc}")
    try:
        try:
            handle = start_fixture(
                args.name,
                seed=args.seed,
                port=args.port,
                listener_url=listener.url if listener else "",
            )
        except RuntimeError as exc:
            return _fail(EXIT_INFRA, str(exc))
        try:
            manifest_path = Path(f"{args.name}.manifest.json")
            manifest_path.write_text(manifest_to_json(handle.manifest), encoding="utf-8")
            _emit(
                args,
                {
                    "name": args.name,
                    "base_url": handle.base_url,
                    "manifest_path": str(manifest_path),
                },
                [
                    f"fixture {args.name} serving at {handle.base_url}",
                    f"manifest: {manifest_path}",
                    "press Ctrl-C to stop",
                ],
            )
            sys.stdout.flush()
            _wait_for_interrupt(handle)
        finally:
            stop_fixture(handle)
    finally:
        if listener is not None:
            listener.close()
    return EXIT_OK


def _split_causes(value: Optional[str]) -> frozenset:
    if not value:
        return frozenset()
    return frozenset(part.strip() for part in value.split(",") if part.strip())


def _cmd_annotate(args: argparse.Namespace) -> int:
    annotations_path = Path(args.records).parent / "annotations.ndjson"
    try:
        annotation = FailureAnnotation(
            target_id=args.target_id,
            run_index=args.run_index,
            failure_agent=args.agent,
            primary_causes=_split_causes(args.primaries),
            secondary_causes=_split_causes(args.secondaries),
        )
        annotate_failure(args.records, annotation, annotations_path)
    except AnnotationError as exc:
        return _fail(EXIT_USAGE, str(exc))
    _emit(
        args,
        {**annotation.to_dict(), "annotations_path": str(annotations_path)},
        [
            f"annotation recorded: {annotations_path} "
            f"({annotation.target_id} run {annotation.run_index}, "
            f"agent {annotation.failure_agent})"
        ],
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vulnproof",
        description="Validate reported web vulnerabilities against sandboxed targets.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_output(p: argparse.ArgumentParser) -> None:
        p.add_argument("--output", choices=("text", "json"), default="text",
                       help="output format (default: text)")

    def add_backend(p: argparse.ArgumentParser) -> None:
        p.add_argument("--backend", choices=("live", "record", "replay"), default="replay",
                       help="model backend mode (default: replay)")
        p.add_argument("--cassette", type=Path, default=None,
                       help="cassette file (record/replay); a directory routes per-target")

    run_p = sub.add_parser("run", help="validate one target end to end")
    run_p.add_argument("--manifest", type=Path, required=True, help="target manifest JSON")
    run_p.add_argument("--mode", choices=tuple(_MODES), default=None,
                       help="override the manifest's run mode")
    add_backend(run_p)
    run_p.add_argument("--max-attempts", type=_positive_int, default=5,
                       help="strategy-execution loop budget (default: 5)")
    run_p.add_argument("--listener", type=_listener_spec, default=None, metavar="HOST:PORT",
                       help="start a callback listener for outbound oracles")
    run_p.add_argument("--wordlist", type=Path, default=None,
                       help="probe these paths before planning starts")
    add_output(run_p)
    run_p.set_defaults(handler=_cmd_run)

    bench_p = sub.add_parser("bench", help="run every target in a manifest set")
    bench_p.add_argument("--manifest", type=Path, required=True, help="manifest set JSON")
    bench_p.add_argument("--mode", choices=tuple(_MODES), default=None,
                         help="override every manifest's run mode")
    add_backend(bench_p)
    bench_p.add_argument("--max-attempts", type=_positive_int, default=5,
                         help="strategy-execution loop budget (default: 5)")
    bench_p.add_argument("--runs", type=_positive_int, default=1,
                         help="runs per target (default: 1)")
    bench_p.add_argument("--records", type=Path, default=None,
                         help="records file to write (default: runs/records.ndjson)")
    bench_p.add_argument("--listener", type=_listener_spec, default=None, metavar="HOST:PORT",
                         help="start a callback listener for outbound oracles")
    bench_p.add_argument("--wordlist", type=Path, default=None,
                         help="probe these paths against each target")
    add_output(bench_p)
    bench_p.set_defaults(handler=_cmd_bench)

    metrics_p = sub.add_parser("metrics", help="aggregate a records file")
    metrics_p.add_argument("--records", type=Path, required=True, help="records NDJSON file")
    metrics_p.add_argument("--max-attempts", type=_positive_int, default=5,
                           help="attempt budget the records were produced under (default: 5)")
    add_output(metrics_p)
    metrics_p.set_defaults(handler=_cmd_metrics)

    validate_p = sub.add_parser("poc-validate", help="grade a stored poc report")
    validate_p.add_argument("poc", type=Path, help="poc JSON file")
    validate_p.add_argument("trace", type=Path, nargs="?", default=None,
                            help="attempt trace artifact to check steps against")
    add_output(validate_p)
    validate_p.set_defaults(handler=_cmd_poc_validate)

    replay_p = sub.add_parser("poc-replay", help="re-run a stored poc against a live target")
    replay_p.add_argument("poc", type=Path, help="poc JSON file")
    replay_p.add_argument("--manifest", type=Path, required=True, help="target manifest JSON")
    replay_p.add_argument("--listener", type=_listener_spec, default=None, metavar="HOST:PORT",
                          help="start a callback listener for outbound oracles")
    add_output(replay_p)
    replay_p.set_defaults(handler=_cmd_poc_replay)

    fixture_p = sub.add_parser("fixture", help="serve a bundled vulnerable target")
    fixture_p.add_argument("name", choices=FIXTURE_NAMES)
    fixture_p.add_argument("port", type=int, nargs="?", default=0,
                           help="port to bind (default: ephemeral)")
    fixture_p.add_argument("seed", type=int, nargs="?", default=1,
                           help="deterministic state seed (default: 1)")
    fixture_p.add_argument("--listener", type=_listener_spec, default=None, metavar="HOST:PORT",
                           help="serve the outbound-callback variant against this listener")
    add_output(fixture_p)
    fixture_p.set_defaults(handler=_cmd_fixture)

    annotate_p = sub.add_parser("annotate", help="attach a failure diagnosis to a run")
    annotate_p.add_argument("--records", type=Path, required=True, help="records NDJSON file")
    annotate_p.add_argument("target_id")
    annotate_p.add_argument("run_index", type=int)
    annotate_p.add_argument("agent", help="strategist | explorer | exploiter")
    annotate_p.add_argument("primaries", help="comma-separated primary causes")
    annotate_p.add_argument("secondaries", nargs="?", default=None,
                            help="comma-separated secondary causes")
    add_output(annotate_p)
    annotate_p.set_defaults(handler=_cmd_annotate)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
