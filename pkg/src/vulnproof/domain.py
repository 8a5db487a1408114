"""Core data model shared by every stage of the validation pipeline.

Everything here is a plain value object: manifests describing one
vulnerability-validation task, code snippets, the append-only working
context, exploitation plans, execution traces, oracle verdicts, and
per-run records. Values are immutable after construction and safe to
share across concurrent runs; the one mutable container (WorkingContext)
is confined to a single engine run.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

CWE_RE = re.compile(r"^CWE-[0-9]+$")


class ManifestError(ValueError):
    """Raised when a manifest document is malformed or violates an invariant.

    ``field_path`` points at the offending field, e.g. ``hint.line_end``.
    """

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


class SnippetError(ValueError):
    pass


class TraceError(ValueError):
    pass


def utc_now() -> str:
    """ISO-8601 UTC timestamp with second precision."""
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class AttackType(str, Enum):
    DATABASE_ACCESS = "database_access"
    DATABASE_MODIFICATION = "database_modification"
    FILE_CREATION = "file_creation"
    FILE_ACCESS = "file_access"
    PRIVILEGE_ESCALATION = "privilege_escalation"
    OUTBOUND_SERVICE = "outbound_service"
    DENIAL_OF_SERVICE = "denial_of_service"


class RunMode(str, Enum):
    GREYBOX_MULTI = "greybox_multi"
    GREYBOX_SINGLE = "greybox_single"
    BLACKBOX_MULTI = "blackbox_multi"


@dataclass(frozen=True)
class VulnerabilityHint:
    """Minimal detection metadata: weakness class plus a code location."""

    cwe_id: str
    file_path: str
    line_start: int
    line_end: int
    note: str = ""

    def __post_init__(self) -> None:
        if not CWE_RE.match(self.cwe_id):
            raise ManifestError("hint.cwe_id", f"expected CWE-<digits>, got {self.cwe_id!r}")
        if self.line_start < 1:
            raise ManifestError("hint.line_start", "must be >= 1")
        if self.line_end < self.line_start:
            raise ManifestError("hint.line_end", "line_end < line_start")
        p = Path(self.file_path)
        if p.is_absolute() or self.file_path.startswith(("/", "\\")):
            raise ManifestError("hint.file_path", "must be relative to the source root")
        if ".." in p.parts:
            raise ManifestError("hint.file_path", "'..' segments are not allowed")
        if not self.file_path:
            raise ManifestError("hint.file_path", "must be non-empty")


@dataclass(frozen=True)
class OracleSpec:
    """Success-oracle declaration carried inside a manifest.

    ``params`` is kind specific; probe channel declarations (``probe_url``,
    ``probe_command``) live alongside the expected markers so the evaluator
    stays target-agnostic. See evaluator module for the per-kind contract.
    """

    oracle_id: str
    kind: AttackType
    params: dict[str, Any] = field(default_factory=dict)

    REQUIRED_PARAMS = {
        AttackType.FILE_CREATION: ("expected_path", "expected_token"),
        AttackType.FILE_ACCESS: ("secret_token",),
        AttackType.DATABASE_ACCESS: ("secret_token",),
        AttackType.DATABASE_MODIFICATION: ("probe_command", "expected_change_marker"),
        AttackType.PRIVILEGE_ESCALATION: ("probe_request", "admin_marker"),
        AttackType.OUTBOUND_SERVICE: ("listener_token",),
        AttackType.DENIAL_OF_SERVICE: ("health_url", "failure_threshold_seconds"),
    }

    def __post_init__(self) -> None:
        if not self.oracle_id:
            raise ManifestError("oracle.oracle_id", "must be non-empty")
        missing = [k for k in self.REQUIRED_PARAMS[self.kind] if k not in self.params]
        if missing:
            raise ManifestError(
                "oracle.params", f"kind {self.kind.value} requires {', '.join(missing)}"
            )


@dataclass(frozen=True)
class TargetManifest:
    """One vulnerability-validation task.

    Grey-box tasks carry a source root and a hint; black-box tasks omit both.
    """

    target_id: str
    base_url: str
    attack_type: AttackType
    oracle: OracleSpec
    source_root: Optional[str] = None
    hint: Optional[VulnerabilityHint] = None
    reset_hook: str = ""
    mode: RunMode = RunMode.GREYBOX_MULTI

    def __post_init__(self) -> None:
        if not self.target_id:
            raise ManifestError("target_id", "must be non-empty")
        if not re.match(r"^https?://[^/\s]+", self.base_url):
            raise ManifestError("base_url", f"not a valid http(s) origin: {self.base_url!r}")
        if self.oracle.kind != self.attack_type:
            raise ManifestError("oracle.kind", "must match attack_type")
        if self.mode is not RunMode.BLACKBOX_MULTI:
            if self.source_root is None:
                raise ManifestError("source_root", "required outside black-box mode")
            if self.hint is None:
                raise ManifestError("hint", "required outside black-box mode")

    @property
    def greybox(self) -> bool:
        return self.mode is not RunMode.BLACKBOX_MULTI

    def validate_paths(self) -> None:
        """Check that source_root exists and the hint file resolves under it."""
        if self.source_root is None:
            return
        root = Path(self.source_root)
        if not root.is_dir():
            raise ManifestError("source_root", f"no such directory: {self.source_root}")
        if self.hint is not None and not (root / self.hint.file_path).is_file():
            raise ManifestError("hint.file_path", f"not found under source root: {self.hint.file_path}")


@dataclass(frozen=True)
class CodeSnippet:
    """Exact source lines for an inclusive, 1-based line range.

    ``clamped`` is set when the requested range ran past end-of-file and was
    cut back to the last line; detection-tool line numbers drift across
    versions, so this is a signal rather than an error.
    """

    file_path: str
    line_start: int
    line_end: int
    text: str
    clamped: bool = False


class EntryKind(str, Enum):
    OBSERVATION = "observation"
    QA = "qa"
    FAILURE_SUMMARY = "failure_summary"
    EVALUATOR_FEEDBACK = "evaluator_feedback"
    ENDPOINT_INVENTORY = "endpoint_inventory"


@dataclass(frozen=True)
class ContextEntry:
    loop_index: int
    kind: EntryKind
    body: str
    question: Optional[str] = None
    excerpts: tuple[CodeSnippet, ...] = ()

    def __post_init__(self) -> None:
        if self.loop_index < 0:
            raise ValueError("loop_index must be >= 0")


class WorkingContext:
    """Append-only record of observations, Q&A, failure summaries and
    evaluator feedback accumulated across exploitation loops.

    Entries are never mutated or removed, and loop indices are
    non-decreasing in insertion order.
    """

    def __init__(self, entries: Iterable[ContextEntry] = ()):
        self._entries: list[ContextEntry] = []
        for e in entries:
            self.append(e)

    def append(self, entry: ContextEntry) -> None:
        if self._entries and entry.loop_index < self._entries[-1].loop_index:
            raise ValueError(
                f"loop_index {entry.loop_index} decreases below {self._entries[-1].loop_index}"
            )
        self._entries.append(entry)

    @property
    def entries(self) -> tuple[ContextEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[ContextEntry]:
        return iter(self._entries)

    def of_kind(self, kind: EntryKind) -> tuple[ContextEntry, ...]:
        return tuple(e for e in self._entries if e.kind is kind)


class ActionKind(str, Enum):
    HTTP = "http"
    SHELL = "shell"
    WRITE_FILE = "write_file"


@dataclass(frozen=True)
class PlanStep:
    description: str
    action_kind: ActionKind
    payload: str
    expected_signal: str = ""

    def __post_init__(self) -> None:
        if not self.payload.strip():
            raise ValueError("plan step payload must be non-empty")


@dataclass(frozen=True)
class ExploitPlan:
    objective: str
    steps: tuple[PlanStep, ...]

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("plan must contain at least one step")


class EventKind(str, Enum):
    COMMAND = "command"
    STDOUT = "stdout"
    STDERR = "stderr"
    HTTP_REQUEST = "http_request"
    HTTP_RESPONSE = "http_response"
    NOTE = "note"


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    timestamp: str
    kind: EventKind
    body: str
    exit_code: Optional[int] = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "seq": self.seq,
            "timestamp": self.timestamp,
            "kind": self.kind.value,
            "body": self.body,
        }
        if self.exit_code is not None:
            d["exit_code"] = self.exit_code
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TraceEvent":
        return cls(
            seq=int(d["seq"]),
            timestamp=str(d["timestamp"]),
            kind=EventKind(d["kind"]),
            body=str(d["body"]),
            exit_code=d.get("exit_code"),
        )


class ExecutionTrace:
    """Ordered, complete log of every command and HTTP exchange in an attempt.

    ``seq`` is strictly increasing, and a command event's stdout/stderr are
    appended before the next command event's outputs can appear.
    """

    def __init__(self, run_id: str):
        self.run_id = run_id
        self._events: list[TraceEvent] = []
        self._seq = 0

    @property
    def events(self) -> tuple[TraceEvent, ...]:
        return tuple(self._events)

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _append(self, kind: EventKind, body: str, exit_code: Optional[int] = None) -> TraceEvent:
        ev = TraceEvent(self._next_seq(), utc_now(), kind, body, exit_code)
        self._events.append(ev)
        return ev

    def add_note(self, body: str) -> None:
        self._append(EventKind.NOTE, body)

    def add_command(self, command: str, exit_code: int, stdout: str, stderr: str) -> None:
        """One shell interaction: command (with exit code), then its outputs."""
        self._append(EventKind.COMMAND, command, exit_code)
        self._append(EventKind.STDOUT, stdout)
        self._append(EventKind.STDERR, stderr)

    def add_http(self, request: str, response: str) -> None:
        self._append(EventKind.HTTP_REQUEST, request)
        self._append(EventKind.HTTP_RESPONSE, response)

    def interaction_count(self) -> int:
        """Commands plus HTTP requests; must equal the environment's count."""
        return sum(
            1 for e in self._events if e.kind in (EventKind.COMMAND, EventKind.HTTP_REQUEST)
        )

    def bodies(self) -> str:
        return "\n".join(e.body for e in self._events)

    def validate(self) -> None:
        prev = 0
        pending_outputs = 0
        for ev in self._events:
            if ev.seq <= prev:
                raise TraceError(f"seq not strictly increasing at {ev.seq}")
            prev = ev.seq
            if ev.kind is EventKind.COMMAND:
                if pending_outputs:
                    raise TraceError(f"command at seq {ev.seq} before previous outputs completed")
                pending_outputs = 2
            elif ev.kind in (EventKind.STDOUT, EventKind.STDERR):
                if pending_outputs <= 0:
                    raise TraceError(f"orphan {ev.kind.value} event at seq {ev.seq}")
                pending_outputs -= 1
        if pending_outputs:
            raise TraceError("trace ends with command outputs missing")

    def to_ndjson(self) -> str:
        return "\n".join(json.dumps(e.to_dict(), sort_keys=True) for e in self._events) + "\n"

    def write(self, path: Path | str) -> None:
        Path(path).write_text(self.to_ndjson(), encoding="utf-8")

    @classmethod
    def from_ndjson(cls, run_id: str, text: str) -> "ExecutionTrace":
        trace = cls(run_id)
        for line in text.splitlines():
            if not line.strip():
                continue
            ev = TraceEvent.from_dict(json.loads(line))
            trace._events.append(ev)
            trace._seq = max(trace._seq, ev.seq)
        trace.validate()
        return trace


class VerdictStatus(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    # Third state so infrastructure failures are never scored as exploit
    # failures: the oracle could not be consulted at all.
    WITHHELD = "withheld"


@dataclass(frozen=True)
class Verdict:
    status: VerdictStatus
    oracle_id: str
    evidence: str
    checked_at: str = field(default_factory=utc_now)
    # attack type of the oracle that produced this verdict, so feedback
    # rendering does not need the OracleSpec in hand
    kind: Optional[AttackType] = None

    def __post_init__(self) -> None:
        if self.status is VerdictStatus.SUCCESS and not self.evidence.strip():
            raise ValueError("success verdict requires non-empty evidence")


@dataclass(frozen=True)
class RunRecord:
    """Aggregated result of one engine run against one target."""

    target_id: str
    run_index: int
    mode: RunMode
    success: bool
    attempts_used: int
    tca: Optional[int] = None
    loop_summaries: tuple[str, ...] = ()
    infrastructure_failure: bool = False
    failure_reason: str = ""

    def __post_init__(self) -> None:
        if self.run_index < 1:
            raise ValueError("run_index is 1-based")
        if self.success != (self.tca is not None):
            raise ValueError("success <=> tca present")
        if self.tca is not None and not (1 <= self.tca <= self.attempts_used):
            raise ValueError("tca must satisfy 1 <= tca <= attempts_used")
        if self.attempts_used < 0:
            raise ValueError("attempts_used must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "target_id": self.target_id,
            "run_index": self.run_index,
            "mode": self.mode.value,
            "success": self.success,
            "tca": self.tca,
            "attempts_used": self.attempts_used,
            "loop_summaries": list(self.loop_summaries),
            "infrastructure_failure": self.infrastructure_failure,
            "failure_reason": self.failure_reason,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunRecord":
        return cls(
            target_id=str(d["target_id"]),
            run_index=int(d["run_index"]),
            mode=RunMode(d["mode"]),
            success=bool(d["success"]),
            tca=d.get("tca"),
            attempts_used=int(d["attempts_used"]),
            loop_summaries=tuple(d.get("loop_summaries", ())),
            infrastructure_failure=bool(d.get("infrastructure_failure", False)),
            failure_reason=str(d.get("failure_reason", "")),
        )


# --- manifest (de)serialization ------------------------------------------

_ATTACK_TYPES = {t.value for t in AttackType}
_MODES = {m.value for m in RunMode}


def _require(doc: dict[str, Any], key: str, path: str = "") -> Any:
    where = f"{path}.{key}" if path else key
    if key not in doc or doc[key] in (None, ""):
        raise ManifestError(where, "missing required field")
    return doc[key]


def parse_target_manifest(document: bytes | str | dict[str, Any]) -> TargetManifest:
    """Parse and validate a manifest document (UTF-8 JSON object).

    Every violation is reported with the offending field path.
    """
    if isinstance(document, (bytes, str)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as e:
            raise ManifestError("$", f"not valid JSON: {e}") from e
    else:
        doc = document
    if not isinstance(doc, dict):
        raise ManifestError("$", "manifest must be a JSON object")

    mode_raw = doc.get("mode", RunMode.GREYBOX_MULTI.value)
    if mode_raw not in _MODES:
        raise ManifestError("mode", f"unknown mode {mode_raw!r}; expected one of {sorted(_MODES)}")
    mode = RunMode(mode_raw)

    attack_raw = _require(doc, "attack_type")
    if attack_raw not in _ATTACK_TYPES:
        raise ManifestError("attack_type", f"unknown attack type {attack_raw!r}")
    attack_type = AttackType(attack_raw)

    oracle_doc = _require(doc, "oracle")
    if not isinstance(oracle_doc, dict):
        raise ManifestError("oracle", "must be an object")
    kind_raw = oracle_doc.get("kind", attack_raw)
    if kind_raw not in _ATTACK_TYPES:
        raise ManifestError("oracle.kind", f"unknown oracle kind {kind_raw!r}")
    oracle = OracleSpec(
        oracle_id=str(_require(oracle_doc, "oracle_id", "oracle")),
        kind=AttackType(kind_raw),
        params=dict(oracle_doc.get("params", {})),
    )

    hint = None
    if doc.get("hint") is not None:
        h = doc["hint"]
        if not isinstance(h, dict):
            raise ManifestError("hint", "must be an object")
        try:
            line_start = int(_require(h, "line_start", "hint"))
            line_end = int(_require(h, "line_end", "hint"))
        except (TypeError, ValueError) as e:
            if isinstance(e, ManifestError):
                raise
            raise ManifestError("hint.line_start", "line numbers must be integers") from e
        hint = VulnerabilityHint(
            cwe_id=str(_require(h, "cwe_id", "hint")),
            file_path=str(_require(h, "file_path", "hint")),
            line_start=line_start,
            line_end=line_end,
            note=str(h.get("note", "")),
        )

    return TargetManifest(
        target_id=str(_require(doc, "target_id")),
        base_url=str(_require(doc, "base_url")),
        attack_type=attack_type,
        oracle=oracle,
        source_root=doc.get("source_root"),
        hint=hint,
        reset_hook=str(doc.get("reset_hook") or ""),
        mode=mode,
    )


def manifest_to_dict(manifest: TargetManifest) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "target_id": manifest.target_id,
        "base_url": manifest.base_url,
        "attack_type": manifest.attack_type.value,
        "oracle": {
            "oracle_id": manifest.oracle.oracle_id,
            "kind": manifest.oracle.kind.value,
            "params": dict(manifest.oracle.params),
        },
        "mode": manifest.mode.value,
    }
    if manifest.source_root is not None:
        doc["source_root"] = manifest.source_root
    if manifest.hint is not None:
        doc["hint"] = {
            "cwe_id": manifest.hint.cwe_id,
            "file_path": manifest.hint.file_path,
            "line_start": manifest.hint.line_start,
            "line_end": manifest.hint.line_end,
        }
        if manifest.hint.note:
            doc["hint"]["note"] = manifest.hint.note
    if manifest.reset_hook:
        doc["reset_hook"] = manifest.reset_hook
    return doc


def manifest_to_json(manifest: TargetManifest) -> str:
    return json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True)


# --- snippet extraction ----------------------------------------------------


def extract_snippet(source_root: Path | str, hint: VulnerabilityHint) -> CodeSnippet:
    """Cut the hinted line range out of the source tree.

    Ranges running past end-of-file clamp to the last line and set the
    ``clamped`` flag. Binary files are rejected.
    """
    path = Path(source_root) / hint.file_path
    if not path.is_file():
        raise SnippetError(f"file not found: {hint.file_path}")
    raw = path.read_bytes()
    if b"\x00" in raw[:8192]:
        raise SnippetError(f"binary file: {hint.file_path}")
    lines = raw.decode("utf-8", errors="replace").splitlines()
    if hint.line_start > len(lines):
        raise SnippetError(
            f"line_start {hint.line_start} past end of {hint.file_path} ({len(lines)} lines)"
        )
    end = min(hint.line_end, len(lines))
    text = "\n".join(lines[hint.line_start - 1 : end])
    return CodeSnippet(
        file_path=hint.file_path,
        line_start=hint.line_start,
        line_end=end,
        text=text,
        clamped=end < hint.line_end,
    )


def snippet_for_range(
    source_root: Path | str, file_path: str, line_start: int, line_end: int
) -> CodeSnippet:
    """extract_snippet without requiring a CWE id (explorer excerpts)."""
    hint = VulnerabilityHint(
        cwe_id="CWE-1", file_path=file_path, line_start=line_start, line_end=line_end
    )
    return extract_snippet(source_root, hint)
