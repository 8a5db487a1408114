"""Benchmark orchestration: manifest sets, repeated runs with resets,
record persistence, and the failure-annotation layer.

Targets run in parallel up to a configured width; each (target, run)
pair emits exactly one RunRecord line. Runs that never happened (dead
target, failed reset, backend setup error) still emit a line, marked as
infrastructure failures, so record files always carry the full
targets x runs matrix.
"""

from __future__ import annotations

import dataclasses
import json
import re
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import requests

from .domain import (
    RunMode,
    RunRecord,
    TargetManifest,
    WorkingContext,
    parse_target_manifest,
)
from .engine import Budgets, EngineError, KnowledgeStore, run_exploitation, run_single_agent
from .llm import BackendConfig, BackendError
from .poc import PoCReport, poc_to_json, render_poc_markdown
from .recon import ReconError, discover_endpoints, is_live
from .sandbox import ExecutionEnvironment, create_env

__all__ = [
    "AnnotationError",
    "FailureAnnotation",
    "HarnessError",
    "ResetError",
    "annotate_failure",
    "failure_distribution",
    "load_annotations",
    "load_manifest_set",
    "load_records",
    "load_taxonomy",
    "persist_run_artifacts",
    "reset_target",
    "run_benchmark",
]

_TAXONOMY_PATH = Path(__file__).parent / "assets" / "failure_taxonomy.json"


class HarnessError(RuntimeError):
    pass


class ResetError(HarnessError):
    pass


class AnnotationError(ValueError):
    pass


@lru_cache(maxsize=1)
def load_taxonomy() -> dict:
    """The fixed failure taxonomy: agents, primary causes, and which
    secondary causes are legal under each primary."""
    return json.loads(_TAXONOMY_PATH.read_text(encoding="utf-8"))


def _secondary_parents() -> dict[str, str]:
    tax = load_taxonomy()
    return {
        secondary: primary
        for primary, secondaries in tax["primary_causes"].items()
        for secondary in secondaries
    }


@dataclass(frozen=True)
class FailureAnnotation:
    """A human-assigned diagnosis of one failed run."""

    target_id: str
    run_index: int
    failure_agent: str
    primary_causes: frozenset
    secondary_causes: frozenset = frozenset()
    notes: str = ""

    def __post_init__(self) -> None:
        tax = load_taxonomy()
        if self.failure_agent not in tax["agents"]:
            raise AnnotationError(
                f"failure_agent {self.failure_agent!r} not in {tax['agents']}"
            )
        if not self.primary_causes:
            raise AnnotationError("at least one primary cause is required")
        known_primary = set(tax["primary_causes"])
        bad = set(self.primary_causes) - known_primary
        if bad:
            raise AnnotationError(
                f"unknown primary cause(s) {sorted(bad)}; valid: {sorted(known_primary)}"
            )
        parents = _secondary_parents()
        bad = set(self.secondary_causes) - set(parents)
        if bad:
            raise AnnotationError(
                f"unknown secondary cause(s) {sorted(bad)}; valid: {sorted(parents)}"
            )
        for secondary in sorted(self.secondary_causes):
            parent = parents[secondary]
            if parent not in self.primary_causes:
                raise AnnotationError(
                    f"secondary cause {secondary!r} requires primary {parent!r} to be listed"
                )

    def to_dict(self) -> dict:
        return {
            "target_id": self.target_id,
            "run_index": self.run_index,
            "failure_agent": self.failure_agent,
            "primary_causes": sorted(self.primary_causes),
            "secondary_causes": sorted(self.secondary_causes),
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FailureAnnotation":
        return cls(
            target_id=str(d["target_id"]),
            run_index=int(d["run_index"]),
            failure_agent=str(d["failure_agent"]),
            primary_causes=frozenset(d["primary_causes"]),
            secondary_causes=frozenset(d.get("secondary_causes", ())),
            notes=str(d.get("notes", "")),
        )


def annotate_failure(
    records_path: Path | str,
    annotation: FailureAnnotation,
    annotations_path: Optional[Path | str] = None,
) -> FailureAnnotation:
    """Attach a diagnosis to a recorded failed run; appends NDJSON."""
    records_path = Path(records_path)
    if not records_path.is_file():
        raise AnnotationError(f"records file not found: {records_path}")
    match = None
    for line in records_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        if doc["target_id"] == annotation.target_id and doc["run_index"] == annotation.run_index:
            match = doc
            break
    if match is None:
        raise AnnotationError(
            f"no record for target {annotation.target_id!r} run {annotation.run_index}"
        )
    if match["success"]:
        raise AnnotationError("cannot annotate a run that succeeded")
    out = Path(annotations_path) if annotations_path else records_path.parent / "annotations.ndjson"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(annotation.to_dict()) + "\n")
    return annotation


def load_records(path: Path | str) -> List[RunRecord]:
    """Read a benchmark records file back into RunRecord objects."""
    path = Path(path)
    if not path.is_file():
        raise HarnessError(f"records file not found: {path}")
    records = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(RunRecord.from_dict(json.loads(line)))
        except (ValueError, KeyError) as exc:
            raise HarnessError(f"{path}:{number}: bad record: {exc}") from exc
    return records


def load_annotations(path: Path | str) -> List[FailureAnnotation]:
    path = Path(path)
    if not path.is_file():
        raise AnnotationError(f"annotations file not found: {path}")
    return [
        FailureAnnotation.from_dict(json.loads(line))
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


def failure_distribution(annotations: Iterable[FailureAnnotation]) -> dict:
    """Counts and percentage shares per agent and per primary cause.

    Multi-label annotations make cause shares sum past 100 by design.
    """
    annotations = list(annotations)
    tax = load_taxonomy()
    n = len(annotations)

    def share(count: int) -> float:
        return count * 100 / n if n else 0.0

    per_agent = {}
    for agent in tax["agents"]:
        count = sum(1 for a in annotations if a.failure_agent == agent)
        per_agent[agent] = {"count": count, "share_pct": share(count)}
    per_cause = {}
    for cause in tax["primary_causes"]:
        count = sum(1 for a in annotations if cause in a.primary_causes)
        per_cause[cause] = {"count": count, "share_pct": share(count)}
    return {"n_annotations": n, "per_agent": per_agent, "per_cause": per_cause}


# ---------------------------------------------------------------------------
# Manifest sets

def load_manifest_set(path: Path | str) -> List[TargetManifest]:
    """A manifest set file is a JSON list of manifests, or an object with
    a "targets" list. Target ids must be unique."""
    path = Path(path)
    if not path.is_file():
        raise HarnessError(f"manifest set not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        doc = doc.get("targets", [])
    if not isinstance(doc, list) or not doc:
        raise HarnessError(f"manifest set {path} holds no targets")
    manifests = [parse_target_manifest(entry) for entry in doc]
    seen = set()
    for m in manifests:
        if m.target_id in seen:
            raise HarnessError(f"duplicate target_id in manifest set: {m.target_id}")
        seen.add(m.target_id)
    return manifests


# ---------------------------------------------------------------------------
# Resets

_HTTP_HOOK = re.compile(r"^(GET|POST)\s+(https?://\S+)$")


def reset_target(manifest: TargetManifest) -> None:
    """Run the manifest's reset hook: '<METHOD> <url>' as an HTTP request,
    anything else as a shell command, empty as a no-op."""
    hook = manifest.reset_hook.strip()
    if not hook:
        return
    m = _HTTP_HOOK.match(hook)
    if m:
        try:
            resp = requests.request(m.group(1), m.group(2), timeout=10)
        except requests.RequestException as exc:
            raise ResetError(f"reset hook failed: {exc}") from exc
        if resp.status_code >= 400:
            raise ResetError(f"reset hook returned {resp.status_code}")
        return
    proc = subprocess.run(hook, shell=True, capture_output=True, text=True, timeout=60)
    if proc.returncode != 0:
        raise ResetError(
            f"reset hook exited {proc.returncode}: {proc.stderr.strip() or proc.stdout.strip()}"
        )


# ---------------------------------------------------------------------------
# Artifact persistence

def persist_run_artifacts(
    run_dir: Path,
    record: RunRecord,
    traces: Sequence,
    poc: Optional[PoCReport],
    context: Optional[WorkingContext],
) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    traces_dir = run_dir / "traces"
    traces_dir.mkdir(exist_ok=True)
    for i, trace in enumerate(traces, 1):
        (traces_dir / f"attempt-{i}.json").write_text(
            json.dumps(
                {"run_id": trace.run_id, "events": [e.to_dict() for e in trace.events]},
                indent=2,
            ),
            encoding="utf-8",
        )
    entries = []
    if context is not None:
        for e in context:
            entries.append({
                "loop_index": e.loop_index,
                "kind": e.kind.value,
                "body": e.body,
                "question": e.question,
                "excerpts": [
                    {
                        "file_path": x.file_path,
                        "line_start": x.line_start,
                        "line_end": x.line_end,
                        "text": x.text,
                    }
                    for x in e.excerpts
                ],
            })
    (run_dir / "context.json").write_text(
        json.dumps({"entries": entries}, indent=2), encoding="utf-8"
    )
    if poc is not None:
        (run_dir / "poc.md").write_text(render_poc_markdown(poc), encoding="utf-8")
        (run_dir / "poc.json").write_text(poc_to_json(poc), encoding="utf-8")
    (run_dir / "summary.json").write_text(
        json.dumps(record.to_dict(), indent=2), encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# Benchmark runner

def _infra_record(manifest: TargetManifest, run_index: int, mode: RunMode, reason: str) -> RunRecord:
    return RunRecord(
        target_id=manifest.target_id,
        run_index=run_index,
        mode=mode,
        success=False,
        attempts_used=0,
        tca=None,
        infrastructure_failure=True,
        failure_reason=reason,
    )


def _backend_for(
    config: BackendConfig, target_id: str, cassette_dir: Optional[Path]
) -> BackendConfig:
    if cassette_dir is not None and config.mode in ("record", "replay"):
        config = dataclasses.replace(
            config, cassette_path=Path(cassette_dir) / f"{target_id}.ndjson"
        )
    # hand the config through and let each run build its own backend:
    # per-role turn counters then line up with the cassette regardless of
    # how many runs came before, and a misconfigured live backend surfaces
    # as a per-run infrastructure failure instead of killing the bench
    return config


def run_benchmark(
    manifests: Sequence[TargetManifest],
    runs_per_target: int,
    budgets: Budgets,
    backend: BackendConfig,
    mode: Optional[RunMode] = None,
    *,
    output_dir: Path | str = "runs",
    records_path: Optional[Path | str] = None,
    width: int = 1,
    listener=None,
    wordlist: Optional[Path | str] = None,
    cassette_dir: Optional[Path | str] = None,
    store_root: Optional[Path | str] = None,
) -> Path:
    """Run every manifest runs_per_target times and return the records file.

    The records file is rewritten, one JSON line per (target, run); artifacts
    land under output_dir/<target_id>/run<N>/.
    """
    if not manifests:
        raise HarnessError("no targets to run")
    if runs_per_target < 1:
        raise HarnessError("runs_per_target must be >= 1")
    seen = set()
    for m in manifests:
        if m.target_id in seen:
            raise HarnessError(f"duplicate target_id: {m.target_id}")
        seen.add(m.target_id)

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    records_file = Path(records_path) if records_path else output_dir / "records.ndjson"
    records_file.parent.mkdir(parents=True, exist_ok=True)
    records_file.write_text("", encoding="utf-8")
    cassette_dir = Path(cassette_dir) if cassette_dir else None

    lock = threading.Lock()

    def emit(record: RunRecord) -> None:
        with lock:
            with records_file.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_dict()) + "\n")

    listener_url = getattr(listener, "url", "") if listener is not None else ""

    def env_factory(manifest: TargetManifest) -> ExecutionEnvironment:
        return create_env(manifest, listener_url=listener_url)

    def bench_target(manifest: TargetManifest) -> None:
        effective_mode = mode or manifest.mode
        if not is_live(manifest.base_url):
            reason = f"target not reachable at {manifest.base_url}"
            for r in range(1, runs_per_target + 1):
                emit(_infra_record(manifest, r, effective_mode, reason))
            return

        endpoints = None
        if wordlist is not None:
            try:
                endpoints = discover_endpoints(
                    manifest.base_url, wordlist, cache_dir=output_dir / "recon",
                )
            except ReconError:
                endpoints = None

        for r in range(1, runs_per_target + 1):
            try:
                reset_target(manifest)
            except ResetError as exc:
                emit(_infra_record(manifest, r, effective_mode, f"reset failed: {exc}"))
                continue
            run_dir = output_dir / manifest.target_id / f"run{r}"
            try:
                chat = _backend_for(backend, manifest.target_id, cassette_dir)
                if effective_mode is RunMode.GREYBOX_SINGLE:
                    store = KnowledgeStore(store_root or output_dir / "knowledge")
                    sink: list = []
                    record = run_single_agent(
                        manifest, budgets, chat, env_factory,
                        store=store, run_index=r, listener=listener, trace_sink=sink,
                    )
                    traces, poc, context = sink, None, None
                else:
                    ctx: list = []
                    record, traces, poc = run_exploitation(
                        manifest, budgets, chat, env_factory,
                        mode=effective_mode, run_index=r,
                        endpoints=endpoints, listener=listener, context_sink=ctx,
                    )
                    context = ctx[0] if ctx else None
            except (EngineError, BackendError) as exc:
                emit(_infra_record(manifest, r, effective_mode, str(exc)))
                continue
            persist_run_artifacts(run_dir, record, traces, poc, context)
            emit(record)

    if width <= 1 or len(manifests) == 1:
        for manifest in manifests:
            bench_target(manifest)
    else:
        with ThreadPoolExecutor(max_workers=width) as pool:
            for future in [pool.submit(bench_target, m) for m in manifests]:
                future.result()
    return records_file
