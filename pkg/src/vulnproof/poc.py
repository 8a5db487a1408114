"""Proof-of-concept reports: generation from traces, validation, replay.

A report is only emitted if every reproduction step can be matched back to
the successful trace (with named placeholders standing in for dynamic
values), so a report can never describe an exploitation path that was not
actually taken. Replay executes the steps literally against a fresh
environment, re-extracting declared dynamic values, and lets the oracle
judge the outcome.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from string import Template
from typing import Optional, Union

from .domain import (
    AttackType,
    CodeSnippet,
    ExecutionTrace,
    EventKind,
    ExploitPlan,
    OracleSpec,
    SnippetError,
    TargetManifest,
    Verdict,
    VerdictStatus,
    snippet_for_range,
)
from .evaluator import evaluate_oracle
from .llm import BackendConfig, ChatBackend, Conversation, normalize_whitespace
from .sandbox import ExecutionEnvironment, SandboxViolation

_PROMPT_DIR = Path(__file__).resolve().parent / "assets" / "prompts"


class PocError(ValueError):
    """Report cannot be produced or parsed."""


class PocTraceMismatch(PocError):
    """Generated report references steps absent from the source trace."""


@dataclass
class PoCReport:
    """Developer-facing exploit report.

    A well-formed report has non-empty trigger, oracle_description, and
    reproduction_steps. The constructor stays permissive so reports from
    outside this generator (deserialized, hand-written) can still be loaded
    and graded by validate_poc; generate_poc never emits a degraded one.
    """

    title: str
    summary: str
    affected_components: list[str]
    code_locations: list[CodeSnippet]
    trigger: str
    oracle_description: str
    reproduction_steps: list[str]
    dynamic_value_setup: Optional[str] = None
    remediation: Optional[str] = None
    source_trace: str = ""


@dataclass(frozen=True)
class QualityCheck:
    has_oracle: bool
    has_steps: bool
    trace_consistent: bool

    @property
    def all_true(self) -> bool:
        return self.has_oracle and self.has_steps and self.trace_consistent


def describe_oracle(oracle: OracleSpec) -> str:
    """Developer-readable statement of what the oracle checks."""
    kind = oracle.kind
    if kind is AttackType.FILE_ACCESS:
        return (
            "The attacker-side evidence contains the seeded secret token, "
            "proving a protected file's contents were disclosed."
        )
    if kind is AttackType.DATABASE_ACCESS:
        return (
            "The attacker-side evidence contains the seeded secret token, "
            "proving protected database contents were disclosed."
        )
    if kind is AttackType.FILE_CREATION:
        return (
            f"The file {oracle.params['expected_path']} exists on the target "
            "and contains the expected token."
        )
    if kind is AttackType.DATABASE_MODIFICATION:
        return (
            "Running the configured probe command shows the expected change "
            "marker in the target's data store."
        )
    if kind is AttackType.PRIVILEGE_ESCALATION:
        return (
            f"The probe request ({oracle.params['probe_request']}) reports the "
            "attacker-created principal holding the administrator role."
        )
    if kind is AttackType.OUTBOUND_SERVICE:
        return (
            "The callback listener receives a request from the target "
            "carrying the expected beacon token."
        )
    return (
        "The target's health endpoint stays unresponsive beyond the "
        "configured threshold."
    )


# ---------------------------------------------------------------------------
# Trace-consistency matching

_PLACEHOLDER = re.compile(r"\{\{([A-Za-z0-9_]+)\}\}")
_HTTP_STEP = re.compile(r"^[A-Z]+\s+/\S*")


def _interaction_bodies(trace: ExecutionTrace) -> list[str]:
    return [
        normalize_whitespace(event.body)
        for event in trace.events
        if event.kind in (EventKind.COMMAND, EventKind.HTTP_REQUEST)
    ]


def _step_pattern(step: str) -> re.Pattern:
    # steps are single lines with literal \n escapes; traces hold real newlines
    parts = _PLACEHOLDER.split(normalize_whitespace(step.replace("\\n", "\n")))
    # odd indices are placeholder names after re.split with one group
    regex = "".join(
        re.escape(part) if i % 2 == 0 else r".{1,200}?" for i, part in enumerate(parts)
    )
    return re.compile(regex)


def step_matches_trace(step: str, trace: ExecutionTrace) -> bool:
    pattern = _step_pattern(step)
    return any(pattern.search(body) for body in _interaction_bodies(trace))


# ---------------------------------------------------------------------------
# Generation

_TITLE_LINE = re.compile(r"^TITLE:\s*(.+)$")
_SUMMARY_LINE = re.compile(r"^SUMMARY:\s*(.+)$")
_COMPONENT_LINE = re.compile(r"^COMPONENT:\s*(.+)$")
_LOCATION_LINE = re.compile(r"^LOCATION:\s*(\S+)\s+(\d+)-(\d+)\s*$")
_TRIGGER_LINE = re.compile(r"^TRIGGER:\s*(.+)$")
_SETUP_LINE = re.compile(r"^SETUP:\s*(.+)$")
_STEP_LINE = re.compile(r"^STEP\s+(\d+):\s*(.+)$")
_REMEDIATION_LINE = re.compile(r"^REMEDIATION:\s*(.+)$")

POC_REMINDER = (
    "Your previous message did not follow the report line format. Reply with "
    "TITLE:, SUMMARY:, TRIGGER:, and STEP 1: lines at minimum, copying steps "
    "verbatim from the trace."
)


def render_trace_text(trace: ExecutionTrace, body_limit: int = 2000) -> str:
    lines = []
    for event in trace.events:
        body = event.body if len(event.body) <= body_limit else event.body[:body_limit] + "..."
        suffix = f" (exit {event.exit_code})" if event.exit_code is not None else ""
        lines.append(f"[{event.seq}] {event.kind.value}{suffix}: {body}")
    return "\n".join(lines)


def _parse_report_lines(text: str) -> dict:
    fields: dict = {"components": [], "locations": [], "setup": [], "steps": []}
    for line in text.splitlines():
        stripped = line.strip()
        for key, pattern in (
            ("title", _TITLE_LINE),
            ("summary", _SUMMARY_LINE),
            ("trigger", _TRIGGER_LINE),
            ("remediation", _REMEDIATION_LINE),
        ):
            m = pattern.match(stripped)
            if m:
                fields[key] = m.group(1).strip()
                break
        else:
            m = _COMPONENT_LINE.match(stripped)
            if m:
                fields["components"].append(m.group(1).strip())
                continue
            m = _LOCATION_LINE.match(stripped)
            if m:
                fields["locations"].append((m.group(1), int(m.group(2)), int(m.group(3))))
                continue
            m = _SETUP_LINE.match(stripped)
            if m:
                fields["setup"].append(m.group(1).strip())
                continue
            m = _STEP_LINE.match(stripped)
            if m:
                fields["steps"].append((int(m.group(1)), m.group(2).strip()))
    missing = [k for k in ("title", "summary", "trigger") if k not in fields]
    if missing or not fields["steps"]:
        raise PocError(f"report output missing required lines: {missing or ['STEP']}")
    indices = [i for i, _ in fields["steps"]]
    if indices != list(range(1, len(indices) + 1)):
        raise PocError("report steps must be numbered 1..n")
    return fields


def _resolve_locations(
    locations: list[tuple[str, int, int]], manifest: TargetManifest
) -> list[CodeSnippet]:
    snippets: list[CodeSnippet] = []
    if manifest.source_root:
        for path, a, b in locations:
            try:
                snippets.append(snippet_for_range(manifest.source_root, path, a, b))
            except (SnippetError, ValueError):
                continue
        hint = manifest.hint
        if hint is not None:
            covered = any(
                s.file_path == hint.file_path
                and s.line_start <= hint.line_start
                and s.line_end >= hint.line_end
                for s in snippets
            )
            if not covered:
                # the reported location always appears, even if the model
                # forgot to cite it
                snippets.insert(
                    0,
                    snippet_for_range(
                        manifest.source_root, hint.file_path, hint.line_start, hint.line_end
                    ),
                )
    return snippets


def generate_poc(
    trace: ExecutionTrace,
    plan: ExploitPlan,
    manifest: TargetManifest,
    verdict: Verdict,
    backend: Union[ChatBackend, BackendConfig],
) -> PoCReport:
    """Write the report for a confirmed exploit; refuses divergent output."""
    if verdict.status is not VerdictStatus.SUCCESS:
        raise PocError(f"verdict status is {verdict.status.value}; report requires success")
    if not trace.events:
        raise PocError("trace is empty; nothing to report")
    chat = backend if isinstance(backend, ChatBackend) else ChatBackend(backend)
    hint = manifest.hint
    if hint is None:
        hint_block = "No source-level report was available (black-box run)."
    else:
        hint_block = (
            f"Reported weakness: {hint.cwe_id} in {hint.file_path} "
            f"lines {hint.line_start}-{hint.line_end}."
        )
    oracle_description = describe_oracle(manifest.oracle)
    prompt = Template((_PROMPT_DIR / "poc_gen.txt").read_text(encoding="utf-8")).substitute(
        attack_type=manifest.attack_type.value,
        hint_block=hint_block,
        objective=plan.objective,
        oracle_description=oracle_description,
        evidence=verdict.evidence or "(oracle confirmed the post-condition)",
        trace=render_trace_text(trace),
    )
    conversation = Conversation()
    conversation.add_user(prompt)
    text = chat.complete("poc_gen", conversation)
    conversation.add_assistant(text)
    try:
        fields = _parse_report_lines(text)
    except PocError:
        conversation.add_user(POC_REMINDER)
        retry = chat.complete("poc_gen", conversation)
        conversation.add_assistant(retry)
        fields = _parse_report_lines(retry)

    steps = [body for _, body in fields["steps"]]
    for index, step in enumerate(steps, 1):
        if not step_matches_trace(step, trace):
            raise PocTraceMismatch(
                f"reproduction step {index} has no counterpart in the trace: {step!r}"
            )
    report = PoCReport(
        title=fields["title"],
        summary=fields["summary"],
        affected_components=fields["components"] or [manifest.target_id],
        code_locations=_resolve_locations(fields["locations"], manifest),
        trigger=fields["trigger"],
        oracle_description=oracle_description,
        reproduction_steps=steps,
        dynamic_value_setup="\n".join(fields["setup"]) or None,
        remediation=fields.get("remediation"),
        source_trace=trace.run_id,
    )
    return report


# ---------------------------------------------------------------------------
# Validation


def validate_poc(report: PoCReport, trace: Optional[ExecutionTrace] = None) -> QualityCheck:
    """Structural quality flags; trace consistency when the trace is at hand."""
    has_oracle = bool(report.oracle_description.strip())
    has_steps = bool(report.reproduction_steps) and all(
        s.strip() for s in report.reproduction_steps
    )
    if trace is None:
        trace_consistent = True
    else:
        trace_consistent = all(step_matches_trace(s, trace) for s in report.reproduction_steps)
    return QualityCheck(has_oracle=has_oracle, has_steps=has_steps, trace_consistent=trace_consistent)


# ---------------------------------------------------------------------------
# Replay

_SETUP_RULE = re.compile(r"^\{\{([A-Za-z0-9_]+)\}\}\s*:=\s*regex\s+(.+?)\s+from\s+step\s+(\d+)\s*$")


@dataclass
class _SetupRule:
    name: str
    pattern: re.Pattern
    step_index: int


def _parse_setup_rules(setup: Optional[str]) -> list[_SetupRule]:
    rules = []
    for line in (setup or "").splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        m = _SETUP_RULE.match(stripped)
        if m is None:
            raise PocError(f"unparseable dynamic value rule: {stripped!r}")
        rules.append(_SetupRule(m.group(1), re.compile(m.group(2)), int(m.group(3))))
    return rules


def replay_poc(
    report: PoCReport,
    fresh_env: ExecutionEnvironment,
    oracle: OracleSpec,
    diagnostics: Optional[list[str]] = None,
    listener_bodies=None,
) -> bool:
    """Execute the reproduction steps literally; let the oracle decide.

    Failures append a 1-based step index message to ``diagnostics`` so the
    caller can tell a broken step from an unconfirmed exploit.
    ``listener_bodies`` accepts a string or a zero-argument callable; a
    callable is read after the steps ran, so callback evidence produced by
    the replay itself is visible to the oracle.
    """
    notes = diagnostics if diagnostics is not None else []
    try:
        rules = _parse_setup_rules(report.dynamic_value_setup)
    except PocError as exc:
        notes.append(f"setup: {exc}")
        return False
    values: dict[str, str] = {}
    for index, raw_step in enumerate(report.reproduction_steps, 1):
        step = raw_step
        for name, value in values.items():
            step = step.replace("{{" + name + "}}", value)
        unresolved = _PLACEHOLDER.search(step)
        if unresolved:
            notes.append(f"step {index}: unresolved dynamic value {unresolved.group(1)!r}")
            return False
        step = step.replace("\\n", "\n")
        try:
            if _HTTP_STEP.match(step):
                result = fresh_env.send_raw(step)
                if result.status == 0:
                    notes.append(f"step {index}: connection failed ({result.reason})")
                    return False
                observed = result.body
            else:
                command = fresh_env.exec_command(step)
                observed = command.stdout + ("\n" + command.stderr if command.stderr else "")
        except SandboxViolation as exc:
            notes.append(f"step {index}: blocked: {exc}")
            return False
        for rule in rules:
            if rule.step_index != index:
                continue
            m = rule.pattern.search(observed)
            if m is None:
                notes.append(f"step {index}: dynamic value {rule.name!r} not found in response")
                return False
            values[rule.name] = m.group(1) if m.groups() else m.group(0)
    verdict = evaluate_oracle(
        oracle,
        fresh_env.manifest.base_url,
        trace=fresh_env.trace,
        listener_bodies=listener_bodies() if callable(listener_bodies) else listener_bodies,
    )
    if verdict.status is not VerdictStatus.SUCCESS:
        notes.append(f"oracle: {verdict.status.value}")
    return verdict.status is VerdictStatus.SUCCESS


# ---------------------------------------------------------------------------
# Rendering


def render_poc_markdown(report: PoCReport) -> str:
    """Markdown form with a fixed section order."""
    out = [f"# {report.title}", ""]
    out += ["## Summary", "", report.summary, ""]
    out += ["## Affected Components", ""]
    out += [f"- {c}" for c in report.affected_components] or ["- (unspecified)"]
    out.append("")
    out += ["## Code Locations", ""]
    if report.code_locations:
        for snippet in report.code_locations:
            out.append(f"- `{snippet.file_path}` lines {snippet.line_start}-{snippet.line_end}:")
            out.append("")
            out.append("```")
            out.append(snippet.text)
            out.append("```")
            out.append("")
    else:
        out += ["- (no source available)", ""]
    out += ["## Trigger", "", "```", report.trigger, "```", ""]
    out += ["## Verification Oracle", "", report.oracle_description, ""]
    out += ["## Reproduction Steps", ""]
    if report.dynamic_value_setup:
        out += ["Dynamic values:", "", "```", report.dynamic_value_setup, "```", ""]
    for i, step in enumerate(report.reproduction_steps, 1):
        out.append(f"{i}. `{step}`")
    out.append("")
    out += ["## Remediation", "", report.remediation or "(not provided)", ""]
    return "\n".join(out)


def poc_to_dict(report: PoCReport) -> dict:
    return {
        "title": report.title,
        "summary": report.summary,
        "affected_components": list(report.affected_components),
        "code_locations": [
            {
                "file_path": s.file_path,
                "line_start": s.line_start,
                "line_end": s.line_end,
                "text": s.text,
            }
            for s in report.code_locations
        ],
        "trigger": report.trigger,
        "oracle_description": report.oracle_description,
        "reproduction_steps": list(report.reproduction_steps),
        "dynamic_value_setup": report.dynamic_value_setup,
        "remediation": report.remediation,
        "source_trace": report.source_trace,
    }


def poc_from_dict(doc: dict) -> PoCReport:
    return PoCReport(
        title=doc["title"],
        summary=doc["summary"],
        affected_components=list(doc.get("affected_components", [])),
        code_locations=[
            CodeSnippet(
                file_path=loc["file_path"],
                line_start=loc["line_start"],
                line_end=loc["line_end"],
                text=loc["text"],
            )
            for loc in doc.get("code_locations", [])
        ],
        trigger=doc["trigger"],
        oracle_description=doc["oracle_description"],
        reproduction_steps=list(doc["reproduction_steps"]),
        dynamic_value_setup=doc.get("dynamic_value_setup"),
        remediation=doc.get("remediation"),
        source_trace=doc.get("source_trace", ""),
    )


def poc_to_json(report: PoCReport) -> str:
    return json.dumps(poc_to_dict(report), indent=2, sort_keys=True)


__all__ = [
    "PoCReport",
    "PocError",
    "PocTraceMismatch",
    "QualityCheck",
    "describe_oracle",
    "generate_poc",
    "poc_from_dict",
    "poc_to_dict",
    "poc_to_json",
    "render_poc_markdown",
    "render_trace_text",
    "replay_poc",
    "step_matches_trace",
    "validate_poc",
]
