"""Role behaviors: strategic decisions, source exploration, plan execution.

Three model-driven roles cooperate per target. The strategist looks at
everything learned so far and commits to exploring source, executing a
plan, or aborting. The explorer answers one source-level question at a
time through deterministic read-only tools. The exploiter carries a plan
out against the sandboxed target, one action per model turn.

All assistant output is line-oriented and parsed strictly: a malformed
message earns exactly one corrective re-prompt, after which the caller
gets a typed error (strategist) or a conservative fallback (explorer and
exploiter, whose loops must always terminate with a usable artifact).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from string import Template
from typing import Optional, Union

from .domain import (
    ActionKind,
    CodeSnippet,
    ContextEntry,
    EntryKind,
    ExecutionTrace,
    ExploitPlan,
    PlanStep,
    SnippetError,
    VulnerabilityHint,
    WorkingContext,
    snippet_for_range,
)
from .llm import BackendConfig, ChatBackend, Conversation, summarize_output
from .recon import ReconReport, render_inventory
from .sandbox import ExecutionEnvironment, SandboxViolation

MAX_RESULT_CHARS = 4000
EXPLORE_BUDGET_DEFAULT = 8
STEP_BUDGET_DEFAULT = 25

_PROMPT_DIR = Path(__file__).resolve().parent / "assets" / "prompts"


class EnvelopeError(ValueError):
    """Assistant output did not satisfy the envelope grammar."""


def _template(name: str) -> Template:
    return Template((_PROMPT_DIR / name).read_text(encoding="utf-8"))


def _as_backend(backend: Union[ChatBackend, BackendConfig]) -> ChatBackend:
    if isinstance(backend, ChatBackend):
        return backend
    return ChatBackend(backend)


# ---------------------------------------------------------------------------
# Envelope grammar


@dataclass(frozen=True)
class AgentEnvelope:
    decision: str
    questions: tuple[str, ...] = ()
    plan: Optional[ExploitPlan] = None
    reason: str = ""
    raw: str = ""


_DECISION_LINE = re.compile(r"^DECISION:\s*(EXPLORE|EXECUTE|ABORT)\s*$")
_QUESTION_LINE = re.compile(r"^Q(\d+):\s*(.+)$")
_PLAN_LINE = re.compile(r"^PLAN:\s*(.*)$")
_STEP_LINE = re.compile(r"^STEP\s+(\d+)\s+\[(http|shell|write_file)\]:\s*(.+)$")
_REASON_LINE = re.compile(r"^REASON:\s*(.+)$")


def _strip_fences(text: str) -> list[str]:
    return [line for line in text.splitlines() if not line.lstrip().startswith("```")]


def _decode_payload(raw: str) -> tuple[str, str]:
    """Payload text with literal \\n expanded; optional ' => signal' suffix."""
    payload, sep, signal = raw.rpartition(" => ")
    if not sep:
        payload, signal = raw, ""
    return payload.replace("\\n", "\n"), signal.strip()


def parse_agent_envelope(text: str) -> AgentEnvelope:
    """Parse one DECISION block out of an assistant message.

    Prose outside the recognized lines is ignored; payload lines that
    belong to a different variant than the declared decision are not.
    """
    lines = _strip_fences(text)
    decision = ""
    start = 0
    for i, line in enumerate(lines):
        m = _DECISION_LINE.match(line.strip())
        if m:
            decision = m.group(1).lower()
            start = i + 1
            break
    if not decision:
        raise EnvelopeError("no DECISION header found")

    questions: list[str] = []
    steps: list[tuple[int, str, str]] = []
    objective: Optional[str] = None
    reason = ""
    for line in lines[start:]:
        stripped = line.strip()
        if _DECISION_LINE.match(stripped):
            break
        m = _QUESTION_LINE.match(stripped)
        if m:
            questions.append(m.group(2).strip())
            continue
        m = _PLAN_LINE.match(stripped)
        if m:
            objective = m.group(1).strip()
            continue
        m = _STEP_LINE.match(stripped)
        if m:
            steps.append((int(m.group(1)), m.group(2), m.group(3)))
            continue
        m = _REASON_LINE.match(stripped)
        if m:
            reason = m.group(1).strip()
            continue

    populated = {
        "explore": bool(questions),
        "execute": bool(steps) or objective is not None,
        "abort": bool(reason),
    }
    for variant, present in populated.items():
        if present and variant != decision:
            raise EnvelopeError(
                f"decision/payload mismatch: {variant} payload under DECISION {decision.upper()}"
            )
    if not populated[decision]:
        raise EnvelopeError(f"decision/payload mismatch: empty {decision} payload")

    if decision == "explore":
        return AgentEnvelope(decision="explore", questions=tuple(questions), raw=text)
    if decision == "abort":
        return AgentEnvelope(decision="abort", reason=reason, raw=text)

    if not steps:
        raise EnvelopeError("decision/payload mismatch: empty plan body")
    plan_steps = []
    for pos, (index, kind, remainder) in enumerate(steps, start=1):
        if index != pos:
            raise EnvelopeError(f"plan steps must be numbered 1..n; got STEP {index} at position {pos}")
        payload, signal = _decode_payload(remainder.strip())
        description = payload.splitlines()[0][:120]
        plan_steps.append(
            PlanStep(
                description=description,
                action_kind=ActionKind(kind),
                payload=payload,
                expected_signal=signal,
            )
        )
    plan = ExploitPlan(objective=objective or "carry out the exploitation plan", steps=tuple(plan_steps))
    return AgentEnvelope(decision="execute", plan=plan, raw=text)


ENVELOPE_REMINDER = (
    "Your previous message was not a valid envelope. Reply with exactly one "
    "block: 'DECISION: EXPLORE' followed by 'Q1:' lines, or 'DECISION: "
    "EXECUTE' followed by 'PLAN:' and 'STEP <i> [<http|shell|write_file>]:' "
    "lines numbered from 1, or 'DECISION: ABORT' followed by 'REASON: <text>'."
)


def request_envelope(backend: ChatBackend, conversation: Conversation) -> AgentEnvelope:
    """One completion, one corrective re-prompt on bad format, then error."""
    text = backend.complete("strategist", conversation)
    conversation.add_assistant(text)
    try:
        return parse_agent_envelope(text)
    except EnvelopeError:
        conversation.add_user(ENVELOPE_REMINDER)
        retry = backend.complete("strategist", conversation)
        conversation.add_assistant(retry)
        return parse_agent_envelope(retry)


# ---------------------------------------------------------------------------
# Strategist


def _render_context(context: WorkingContext) -> str:
    if len(context) == 0:
        return "(nothing yet)"
    lines = []
    for entry in context:
        label = f"[loop {entry.loop_index}] {entry.kind.value}"
        if entry.question:
            label += f" (Q: {entry.question})"
        lines.append(f"{label}: {entry.body}")
        for ex in entry.excerpts:
            lines.append(f"    excerpt {ex.file_path} {ex.line_start}-{ex.line_end}:")
            lines.extend(f"        {line}" for line in ex.text.splitlines())
    return "\n".join(lines)


def strategist_decide(
    context: WorkingContext,
    hint: Optional[VulnerabilityHint],
    endpoints: Optional[ReconReport],
    backend: Union[ChatBackend, BackendConfig],
    *,
    attack_type: str,
    snippet: Optional[CodeSnippet] = None,
    explore_budget: int = EXPLORE_BUDGET_DEFAULT,
) -> AgentEnvelope:
    """Ask the strategist for the next move given everything known so far.

    Prompts never mention the target's concrete address; requests are
    path-relative, so recorded conversations replay against any port.
    """
    chat = _as_backend(backend)
    if hint is None:
        hint_block = "No vulnerability report is available; only the application itself."
    else:
        hint_block = (
            f"Reported weakness: {hint.cwe_id} in {hint.file_path} "
            f"lines {hint.line_start}-{hint.line_end}."
        )
        if hint.note:
            hint_block += f"\nReport note: {hint.note}"
    if snippet is None:
        snippet_block = ""
    else:
        snippet_block = (
            f"Source excerpt ({snippet.file_path} lines "
            f"{snippet.line_start}-{snippet.line_end}):\n{snippet.text}\n"
        )
    inventory = render_inventory(endpoints) if endpoints is not None else "(no endpoint inventory)"
    prompt = _template("strategist.txt").substitute(
        attack_type=attack_type,
        hint_block=hint_block,
        snippet_block=snippet_block,
        inventory=inventory,
        context=_render_context(context),
        explore_budget=explore_budget,
    )
    conversation = Conversation()
    conversation.add_user(prompt)
    return request_envelope(chat, conversation)


# ---------------------------------------------------------------------------
# Explorer


class SourceToolset:
    """Deterministic read-only primitives over one source tree.

    Every operation returns text for the model; failures become error
    strings, never exceptions, so the tool loop cannot wedge. ``calls``
    counts invocations for instrumentation.
    """

    MAX_READ_LINES = 400
    MAX_SEARCH_HITS = 50

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root).resolve()
        self.calls = 0

    def _resolve(self, rel: str) -> Optional[Path]:
        candidate = Path(rel)
        resolved = (candidate if candidate.is_absolute() else self.root / candidate).resolve()
        if resolved != self.root and self.root not in resolved.parents:
            return None
        return resolved

    def list_dir(self, rel: str = ".") -> str:
        self.calls += 1
        path = self._resolve(rel)
        if path is None:
            return f"error: path escapes the source tree: {rel}"
        if not path.is_dir():
            return f"error: no such directory: {rel}"
        entries = []
        for child in sorted(path.iterdir(), key=lambda p: p.name):
            entries.append(child.name + "/" if child.is_dir() else child.name)
        return "\n".join(entries) if entries else "(empty directory)"

    def read_file(self, rel: str, start: int = 1, end: Optional[int] = None) -> str:
        self.calls += 1
        path = self._resolve(rel)
        if path is None:
            return f"error: path escapes the source tree: {rel}"
        if not path.is_file():
            return f"error: no such file: {rel}"
        first = max(start, 1)
        last = end if end is not None else first + self.MAX_READ_LINES - 1
        try:
            snippet = snippet_for_range(
                self.root, str(path.relative_to(self.root)), first, last
            )
        except (SnippetError, ValueError) as exc:
            return f"error: {exc}"
        lines = snippet.text.splitlines()
        numbered = [
            f"{snippet.line_start + i:>5}| {line}" for i, line in enumerate(lines[: self.MAX_READ_LINES])
        ]
        if len(lines) > self.MAX_READ_LINES:
            numbered.append(f"... truncated at {self.MAX_READ_LINES} lines")
        return "\n".join(numbered)

    def search_text(self, needle: str) -> str:
        self.calls += 1
        if not needle:
            return "error: empty search text"
        hits: list[str] = []
        for path in sorted(self.root.rglob("*")):
            if not path.is_file():
                continue
            try:
                content = path.read_bytes()
            except OSError:
                continue
            if b"\x00" in content[:8192]:
                continue
            rel = path.relative_to(self.root)
            for lineno, line in enumerate(content.decode("utf-8", errors="replace").splitlines(), 1):
                if needle in line:
                    hits.append(f"{rel}:{lineno}: {line.strip()}")
                    if len(hits) >= self.MAX_SEARCH_HITS:
                        hits.append("... more hits omitted")
                        return "\n".join(hits)
        return "\n".join(hits) if hits else f"no matches for: {needle}"

    def path_exists(self, rel: str) -> str:
        self.calls += 1
        path = self._resolve(rel)
        if path is None:
            return f"error: path escapes the source tree: {rel}"
        if path.is_file():
            return f"exists (file): {rel}"
        if path.is_dir():
            return f"exists (directory): {rel}"
        return f"absent: {rel}"


_TOOL_LINE = re.compile(r"^TOOL:\s*(list_dir|read_file|search_text|path_exists)\s*(.*)$")
_ANSWER_LINE = re.compile(r"^ANSWER:\s*(.*)$")
_EXCERPT_LINE = re.compile(r"^EXCERPT:\s*(\S+)\s+(\d+)-(\d+)\s*$")
_READ_ARGS = re.compile(r"^(\S+)(?:\s+(\d+)-(\d+))?\s*$")

EXPLORER_REMINDER = (
    "Reply with exactly one 'TOOL: <name> <args>' line or an 'ANSWER:' block; "
    "nothing else is understood."
)


def _run_tool(toolset: SourceToolset, name: str, args: str) -> str:
    args = args.strip()
    if name == "list_dir":
        return toolset.list_dir(args or ".")
    if name == "search_text":
        return toolset.search_text(args)
    if name == "path_exists":
        return toolset.path_exists(args)
    m = _READ_ARGS.match(args)
    if not m:
        return "error: read_file wants '<path> [<start>-<end>]'"
    start = int(m.group(2)) if m.group(2) else 1
    end = int(m.group(3)) if m.group(3) else None
    return toolset.read_file(m.group(1), start, end)


def _parse_answer(
    text: str, source_root: Path, incomplete: bool
) -> tuple[str, tuple[CodeSnippet, ...]]:
    body_lines: list[str] = []
    excerpts: list[CodeSnippet] = []
    in_answer = False
    for line in text.splitlines():
        stripped = line.strip()
        m = _EXCERPT_LINE.match(stripped)
        if m:
            try:
                # re-extract from disk: cited text is always verbatim source,
                # and file_path stays tree-relative for location-independence
                excerpts.append(
                    snippet_for_range(source_root, m.group(1), int(m.group(2)), int(m.group(3)))
                )
            except (SnippetError, ValueError, OSError):
                continue
            continue
        m = _ANSWER_LINE.match(stripped)
        if m:
            in_answer = True
            if m.group(1):
                body_lines.append(m.group(1))
            continue
        if in_answer and stripped:
            body_lines.append(stripped)
    body = " ".join(body_lines).strip() or "(no findings reported)"
    if incomplete:
        body = "[incomplete] " + body
    return body, tuple(excerpts)


def explorer_answer(
    question: str,
    source_root: Union[str, Path],
    backend: Union[ChatBackend, BackendConfig],
    tool_budget: int = EXPLORE_BUDGET_DEFAULT,
    *,
    loop_index: int = 0,
    toolset: Optional[SourceToolset] = None,
) -> ContextEntry:
    """Answer one question by reading the source tree, never the network."""
    chat = _as_backend(backend)
    root = Path(source_root).resolve()
    tools = toolset if toolset is not None else SourceToolset(root)
    conversation = Conversation()
    conversation.add_user(
        _template("explorer.txt").substitute(question=question, tool_budget=tool_budget)
    )
    calls = 0
    reminded = False
    nudged = False
    while True:
        text = chat.complete("explorer", conversation)
        conversation.add_assistant(text)
        first = next((l.strip() for l in text.splitlines() if l.strip()), "")
        if _ANSWER_LINE.match(first) or "\nANSWER:" in text:
            body, excerpts = _parse_answer(text, root, incomplete=nudged)
            return ContextEntry(
                loop_index=loop_index, kind=EntryKind.QA, question=question,
                body=body, excerpts=excerpts,
            )
        tool = _TOOL_LINE.match(first)
        if tool and calls < tool_budget:
            output = _run_tool(tools, tool.group(1), tool.group(2))
            calls += 1
            result = summarize_output(output, MAX_RESULT_CHARS)
            if calls == tool_budget:
                conversation.add_user(
                    f"RESULT:\n{result}\n\nTool budget exhausted; reply with ANSWER: now."
                )
                nudged = True
            else:
                conversation.add_user(f"RESULT:\n{result}")
            continue
        if tool:
            # budget already spent and still asking for tools
            body, excerpts = _parse_answer(text, root, incomplete=True)
            return ContextEntry(
                loop_index=loop_index, kind=EntryKind.QA, question=question,
                body=body, excerpts=excerpts,
            )
        if not reminded:
            reminded = True
            conversation.add_user(EXPLORER_REMINDER)
            continue
        # second malformed turn: take the text itself as a best-effort answer
        return ContextEntry(
            loop_index=loop_index, kind=EntryKind.QA, question=question,
            body=text.strip() or "(no findings reported)",
        )


# ---------------------------------------------------------------------------
# Exploiter


@dataclass
class OutcomeSummary:
    """The exploiter's own reading of how its attempt went.

    Distinct from the oracle verdict: this is the attacker-side judgment
    that feeds the next planning round.
    """

    succeeded_locally: bool
    observations: list[str] = field(default_factory=list)
    failure_analysis: Optional[str] = None
    trace_ref: str = ""

    def __post_init__(self) -> None:
        if not self.succeeded_locally and not self.failure_analysis:
            raise ValueError("failure_analysis required when succeeded_locally is false")


_ACTION_LINE = re.compile(r"^ACTION:\s*(HTTP|SHELL|WRITE_FILE)\s*(.*)$")
_FINISH_LINE = re.compile(r"^FINISH:\s*(SUCCESS|FAILURE)\s*$")
_OBSERVATION_LINE = re.compile(r"^OBSERVATION:\s*(.+)$")
_ANALYSIS_LINE = re.compile(r"^ANALYSIS:\s*(.+)$")

EXPLOITER_REMINDER = (
    "Reply with exactly one 'ACTION: HTTP|SHELL|WRITE_FILE' block or a "
    "'FINISH: SUCCESS|FAILURE' block; nothing else is understood."
)


def _render_plan(plan: ExploitPlan) -> str:
    lines = []
    for i, step in enumerate(plan.steps, 1):
        suffix = f" => {step.expected_signal}" if step.expected_signal else ""
        payload = step.payload.replace("\n", "\\n")
        lines.append(f"  {i}. [{step.action_kind.value}] {payload}{suffix}")
    return "\n".join(lines)


def _body_after(text: str, header_line: str) -> str:
    _, _, rest = text.partition(header_line)
    return rest.lstrip("\n")


def _parse_finish(text: str, trace_ref: str) -> Optional[OutcomeSummary]:
    succeeded: Optional[bool] = None
    observations: list[str] = []
    analysis_parts: list[str] = []
    for line in text.splitlines():
        stripped = line.strip()
        m = _FINISH_LINE.match(stripped)
        if m:
            succeeded = m.group(1) == "SUCCESS"
            continue
        m = _OBSERVATION_LINE.match(stripped)
        if m:
            observations.append(m.group(1).strip())
            continue
        m = _ANALYSIS_LINE.match(stripped)
        if m:
            analysis_parts.append(m.group(1).strip())
    if succeeded is None:
        return None
    analysis = " ".join(analysis_parts) or None
    if not succeeded and analysis is None:
        analysis = "no analysis provided"
    return OutcomeSummary(
        succeeded_locally=succeeded,
        observations=observations,
        failure_analysis=analysis,
        trace_ref=trace_ref,
    )


def _perform_action(env: ExecutionEnvironment, kind: str, arg: str, text: str) -> str:
    lines = text.split("\n")
    header_index = next(i for i, l in enumerate(lines) if _ACTION_LINE.match(l.strip()))
    payload = "\n".join(lines[header_index + 1 :]).lstrip("\n")
    try:
        if kind == "HTTP":
            if not payload.strip():
                return "error: ACTION: HTTP needs a raw request on the following lines"
            result = env.send_raw(payload)
            return result.render()
        if kind == "SHELL":
            command = next((l for l in payload.splitlines() if l.strip()), "")
            if not command:
                return "error: ACTION: SHELL needs a command on the following line"
            result = env.exec_command(command)
            out = f"exit code: {result.exit_code}\nstdout:\n{result.stdout}"
            if result.stderr:
                out += f"\nstderr:\n{result.stderr}"
            return out
        if not arg.strip():
            return "error: ACTION: WRITE_FILE needs a relative path on the ACTION line"
        written = env.write_file(arg.strip(), payload)
        return f"wrote {written.name} ({len(payload)} chars)"
    except SandboxViolation as exc:
        return f"blocked by environment policy: {exc}"


def exploiter_run(
    plan: ExploitPlan,
    env: ExecutionEnvironment,
    backend: Union[ChatBackend, BackendConfig],
    step_budget: int = STEP_BUDGET_DEFAULT,
) -> tuple[ExecutionTrace, OutcomeSummary]:
    """Drive the plan against the environment, one action per model turn.

    Every command and HTTP exchange lands in the environment's trace; the
    loop stops at FINISH, at the step budget, or after two protocol
    violations in a row, always with a well-formed OutcomeSummary.
    """
    chat = _as_backend(backend)
    if not env.alive:
        raise SandboxViolation("execution environment has been destroyed")
    trace = env.trace
    source_note = " (the target source is under ./source)" if env.source_dir else ""
    conversation = Conversation()
    conversation.add_user(
        _template("exploiter.txt").substitute(
            objective=plan.objective,
            plan=_render_plan(plan),
            step_budget=step_budget,
            tools=", ".join(sorted(env.policy.tool_allowlist)),
            source_note=source_note,
        )
    )
    steps_used = 0
    reminded = False
    while True:
        text = chat.complete("exploiter", conversation)
        conversation.add_assistant(text)
        summary = _parse_finish(text, trace.run_id)
        if summary is not None:
            return trace, summary
        first = next((l.strip() for l in text.splitlines() if l.strip()), "")
        action = _ACTION_LINE.match(first)
        if action is None:
            if not reminded:
                reminded = True
                conversation.add_user(EXPLOITER_REMINDER)
                continue
            return trace, OutcomeSummary(
                succeeded_locally=False,
                observations=["exploiter stopped responding in protocol"],
                failure_analysis="protocol violation: two consecutive unparseable turns",
                trace_ref=trace.run_id,
            )
        reminded = False
        output = _perform_action(env, action.group(1), action.group(2), text)
        steps_used += 1
        result = summarize_output(output, MAX_RESULT_CHARS)
        if steps_used >= step_budget:
            conversation.add_user(
                f"RESULT:\n{result}\n\nStep budget exhausted; reply with FINISH now."
            )
            final = chat.complete("exploiter", conversation)
            conversation.add_assistant(final)
            summary = _parse_finish(final, trace.run_id)
            if summary is None:
                summary = OutcomeSummary(
                    succeeded_locally=False,
                    observations=["step budget exhausted"],
                    failure_analysis="ran out of actions before completing the plan",
                    trace_ref=trace.run_id,
                )
            return trace, summary
        conversation.add_user(f"RESULT:\n{result}")


# protocol pieces shared with the single-agent runner
ACTION_LINE = _ACTION_LINE
TOOL_LINE = _TOOL_LINE
FINISH_LINE = _FINISH_LINE
run_source_tool = _run_tool
perform_env_action = _perform_action
parse_finish = _parse_finish


__all__ = [
    "ACTION_LINE",
    "AgentEnvelope",
    "EnvelopeError",
    "ENVELOPE_REMINDER",
    "EXPLORE_BUDGET_DEFAULT",
    "FINISH_LINE",
    "STEP_BUDGET_DEFAULT",
    "OutcomeSummary",
    "SourceToolset",
    "TOOL_LINE",
    "explorer_answer",
    "exploiter_run",
    "parse_agent_envelope",
    "parse_finish",
    "perform_env_action",
    "request_envelope",
    "run_source_tool",
    "strategist_decide",
    "summarize_output",
]
