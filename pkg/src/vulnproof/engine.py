"""The exploitation loop: plan, optionally explore, execute, evaluate, refine.

A run is a bounded walk through an explicit state machine. The strategist
decides each move, the explorer answers source questions, the exploiter
carries out plans, and the oracle verdict after every execution either ends
the run or feeds the next loop. `run_single_agent` collapses all three
roles into one conversation over a shared step budget, backed by a
persistent per-target knowledge store.
"""

from __future__ import annotations

import dataclasses
import json
import re
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from string import Template
from typing import Callable, List, Optional, Tuple, Union

from .agents import (
    ACTION_LINE,
    EnvelopeError,
    SourceToolset,
    TOOL_LINE,
    exploiter_run,
    explorer_answer,
    parse_finish,
    perform_env_action,
    run_source_tool,
    strategist_decide,
)
from .domain import (
    ContextEntry,
    EntryKind,
    ExecutionTrace,
    RunMode,
    RunRecord,
    SnippetError,
    TargetManifest,
    Verdict,
    VerdictStatus,
    WorkingContext,
    extract_snippet,
)
from .evaluator import evaluate_oracle, feedback_text
from .llm import BackendConfig, BackendError, ChatBackend, Conversation, summarize_output
from .metrics import loop_equivalent_attempts
from .poc import PocError, PoCReport, generate_poc
from .recon import ReconReport, is_live
from .sandbox import ExecutionEnvironment

__all__ = [
    "Budgets",
    "EngineError",
    "EngineState",
    "FactEntry",
    "IllegalTransition",
    "KnowledgeStore",
    "Phase",
    "FACT_CATEGORIES",
    "next_state",
    "run_exploitation",
    "run_single_agent",
]


class EngineError(RuntimeError):
    """A run could not be started or driven as requested."""


class IllegalTransition(EngineError):
    pass


@dataclass(frozen=True)
class Budgets:
    """Per-run resource limits; max_attempts is the loop bound."""

    max_attempts: int = 5
    explore_questions_per_loop: int = 8
    exploiter_steps_per_loop: int = 25

    def __post_init__(self) -> None:
        for name in ("max_attempts", "explore_questions_per_loop", "exploiter_steps_per_loop"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class Phase(str, Enum):
    INIT = "init"
    PLANNING = "planning"
    EXPLORING = "exploring"
    EXECUTING = "executing"
    EVALUATING = "evaluating"
    REFINING = "refining"
    SUCCEEDED = "succeeded"
    EXHAUSTED = "exhausted"


TERMINAL_PHASES = frozenset({Phase.SUCCEEDED, Phase.EXHAUSTED})

EVENTS = frozenset({
    "plan_ready(explore)",
    "plan_ready(execute)",
    "plan_ready(abort)",
    "exploration_done",
    "execution_done",
    "verdict(success)",
    "verdict(failure)",
})


@dataclass(frozen=True)
class EngineState:
    """One point in a run; transitions happen only through next_state."""

    phase: Phase
    loop_index: int
    max_attempts: int
    context: WorkingContext
    last_verdict: Optional[Verdict] = None
    abort_reason: str = ""

    def __post_init__(self) -> None:
        if self.loop_index < 0:
            raise ValueError("loop_index must be >= 0")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.phase not in TERMINAL_PHASES and self.loop_index >= self.max_attempts:
            raise ValueError("loop_index must stay below max_attempts while running")


def next_state(state: EngineState, event: str, reason: str = "") -> EngineState:
    """Pure transition function; raises IllegalTransition off the table."""
    if event not in EVENTS:
        raise IllegalTransition(f"unknown event: {event!r}")
    move = lambda **kw: dataclasses.replace(state, **kw)  # noqa: E731
    phase = state.phase
    if phase in (Phase.INIT, Phase.PLANNING, Phase.REFINING):
        if event == "plan_ready(explore)":
            return move(phase=Phase.EXPLORING)
        if event == "plan_ready(execute)":
            return move(phase=Phase.EXECUTING)
        if event == "plan_ready(abort)":
            return move(phase=Phase.EXHAUSTED, abort_reason=reason or "no reason given")
    elif phase is Phase.EXPLORING and event == "exploration_done":
        return move(phase=Phase.PLANNING)
    elif phase is Phase.EXECUTING and event == "execution_done":
        return move(phase=Phase.EVALUATING)
    elif phase is Phase.EVALUATING:
        if event == "verdict(success)":
            return move(phase=Phase.SUCCEEDED)
        if event == "verdict(failure)":
            if state.loop_index >= state.max_attempts - 1:
                return move(phase=Phase.EXHAUSTED)
            return move(phase=Phase.REFINING, loop_index=state.loop_index + 1)
    raise IllegalTransition(f"no transition for ({phase.value}, {event})")


EnvFactory = Callable[[TargetManifest], ExecutionEnvironment]


def _as_chat(backend: Union[ChatBackend, BackendConfig]) -> ChatBackend:
    return backend if isinstance(backend, ChatBackend) else ChatBackend(backend)


def _normalize_manifest(manifest: TargetManifest, mode: Optional[RunMode]) -> TargetManifest:
    mode = mode or manifest.mode
    if mode is RunMode.BLACKBOX_MULTI:
        # black-box runs carry no detection metadata whatsoever
        return dataclasses.replace(manifest, mode=mode, source_root=None, hint=None)
    if mode is not manifest.mode:
        return dataclasses.replace(manifest, mode=mode)
    return manifest


def _default_evaluator(oracle, base_url, trace=None, listener_bodies=None) -> Verdict:
    return evaluate_oracle(oracle, base_url, trace=trace, listener_bodies=listener_bodies)


def run_exploitation(
    manifest: TargetManifest,
    budgets: Budgets,
    backend: Union[ChatBackend, BackendConfig],
    env_factory: EnvFactory,
    evaluator: Optional[Callable[..., Verdict]] = None,
    mode: Optional[RunMode] = None,
    *,
    run_index: int = 1,
    endpoints: Optional[ReconReport] = None,
    listener=None,
    context_sink: Optional[list] = None,
) -> Tuple[RunRecord, List[ExecutionTrace], Optional[PoCReport]]:
    """Drive one full validation run against a live target.

    Returns the record, one trace per executed loop, and the PoC report
    when the run succeeded and report generation went through. Backend
    and cassette problems become failed records flagged as infrastructure
    failures rather than exceptions; an unreachable target raises, since
    no meaningful run ever started.
    """
    chat = _as_chat(backend)
    manifest = _normalize_manifest(manifest, mode)
    if not is_live(manifest.base_url):
        raise EngineError(f"target not reachable at {manifest.base_url}")
    check = evaluator if evaluator is not None else _default_evaluator

    env = env_factory(manifest)
    traces: List[ExecutionTrace] = []
    summaries: List[str] = []
    poc: Optional[PoCReport] = None
    record: Optional[RunRecord] = None

    def failed(reason: str, infra: bool) -> RunRecord:
        return RunRecord(
            target_id=manifest.target_id,
            run_index=run_index,
            mode=manifest.mode,
            success=False,
            attempts_used=len(traces),
            tca=None,
            loop_summaries=tuple(summaries),
            infrastructure_failure=infra,
            failure_reason=reason,
        )

    try:
        context = WorkingContext()
        if context_sink is not None:
            context_sink.append(context)
        snippet = None
        if manifest.hint is not None and env.source_dir is not None:
            try:
                snippet = extract_snippet(env.source_dir, manifest.hint)
            except (SnippetError, OSError):
                snippet = None
        toolset = SourceToolset(env.source_dir) if env.source_dir is not None else None

        state = EngineState(
            phase=Phase.INIT,
            loop_index=0,
            max_attempts=budgets.max_attempts,
            context=context,
        )
        envelope = None
        plan = None
        trace: Optional[ExecutionTrace] = None
        outcome = None
        explored_this_loop = False
        corrected_this_loop = False
        failure_reason = ""

        while state.phase not in TERMINAL_PHASES:
            if state.phase in (Phase.INIT, Phase.PLANNING, Phase.REFINING):
                envelope = strategist_decide(
                    context,
                    manifest.hint,
                    endpoints,
                    chat,
                    attack_type=manifest.attack_type.value,
                    snippet=snippet,
                    explore_budget=budgets.explore_questions_per_loop,
                )
                if envelope.decision == "explore":
                    if toolset is None or explored_this_loop:
                        why = (
                            "Source exploration is not available in this run."
                            if toolset is None
                            else "This loop's exploration round is already spent."
                        )
                        if not corrected_this_loop:
                            corrected_this_loop = True
                            context.append(ContextEntry(
                                state.loop_index,
                                EntryKind.OBSERVATION,
                                f"{why} Decide EXECUTE or ABORT.",
                            ))
                            continue
                        failure_reason = (
                            "strategist requested exploration without source access"
                            if toolset is None
                            else "strategist looped on exploration"
                        )
                        state = next_state(state, "plan_ready(abort)", reason=failure_reason)
                    else:
                        state = next_state(state, "plan_ready(explore)")
                elif envelope.decision == "execute":
                    plan = envelope.plan
                    state = next_state(state, "plan_ready(execute)")
                else:
                    state = next_state(state, "plan_ready(abort)", reason=envelope.reason)

            elif state.phase is Phase.EXPLORING:
                for question in envelope.questions[: budgets.explore_questions_per_loop]:
                    context.append(explorer_answer(
                        question,
                        env.source_dir,
                        chat,
                        loop_index=state.loop_index,
                        toolset=toolset,
                    ))
                explored_this_loop = True
                state = next_state(state, "exploration_done")

            elif state.phase is Phase.EXECUTING:
                env.begin_attempt(f"{manifest.target_id}-r{run_index}-a{len(traces) + 1}")
                trace, outcome = exploiter_run(
                    plan, env, chat, step_budget=budgets.exploiter_steps_per_loop,
                )
                traces.append(trace)
                state = next_state(state, "execution_done")

            elif state.phase is Phase.EVALUATING:
                bodies = listener.evidence_text() if listener is not None else None
                verdict = check(
                    manifest.oracle, manifest.base_url, trace=trace, listener_bodies=bodies,
                )
                state = dataclasses.replace(state, last_verdict=verdict)
                loop_no = state.loop_index + 1
                if verdict.status is VerdictStatus.SUCCESS:
                    summaries.append(f"loop {loop_no}: {plan.objective}: success: {verdict.evidence}")
                    state = next_state(state, "verdict(success)")
                else:
                    analysis = (
                        outcome.failure_analysis
                        or "; ".join(outcome.observations)
                        or "no analysis available"
                    )
                    context.append(ContextEntry(
                        state.loop_index, EntryKind.EVALUATOR_FEEDBACK, feedback_text(verdict),
                    ))
                    context.append(ContextEntry(
                        state.loop_index, EntryKind.FAILURE_SUMMARY, analysis,
                    ))
                    summaries.append(f"loop {loop_no}: {plan.objective}: failure: {analysis}")
                    state = next_state(state, "verdict(failure)")
                    explored_this_loop = False
                    corrected_this_loop = False

        if state.phase is Phase.SUCCEEDED:
            try:
                poc = generate_poc(trace, plan, manifest, state.last_verdict, chat)
            except PocError:
                poc = None
            record = RunRecord(
                target_id=manifest.target_id,
                run_index=run_index,
                mode=manifest.mode,
                success=True,
                attempts_used=len(traces),
                tca=state.loop_index + 1,
                loop_summaries=tuple(summaries),
            )
        else:
            if not failure_reason:
                if state.abort_reason:
                    failure_reason = f"aborted by strategist: {state.abort_reason}"
                else:
                    failure_reason = f"attempt budget exhausted after {len(traces)} loops"
            withheld = (
                state.last_verdict is not None
                and state.last_verdict.status is VerdictStatus.WITHHELD
            )
            record = failed(failure_reason, infra=withheld)
    except BackendError as exc:
        record = failed(f"backend failure: {exc}", infra=True)
    except EnvelopeError as exc:
        record = failed(f"strategist protocol violation: {exc}", infra=False)
    finally:
        env.destroy()
    return record, traces, poc


# ---------------------------------------------------------------------------
# Knowledge store (single-agent mode)

FACT_CATEGORIES = frozenset({
    "endpoint",
    "config_constraint",
    "auth_requirement",
    "code_location",
    "error_signature",
})


@dataclass(frozen=True)
class FactEntry:
    """One durable statement about a target, carried across runs."""

    category: str
    body: str
    source_run: str = ""

    def __post_init__(self) -> None:
        if self.category not in FACT_CATEGORIES:
            raise ValueError(
                f"unknown fact category {self.category!r}; expected one of {sorted(FACT_CATEGORIES)}"
            )
        if not self.body.strip():
            raise ValueError("fact body must be non-empty")

    @property
    def key(self) -> tuple:
        return (self.category, self.body)


class KnowledgeStore:
    """Append-only per-target fact files, deduplicated by (category, body).

    One NDJSON file per target under the store directory; concurrent runs
    against the same store serialize writes through a process-local lock.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._cache: dict[str, list[FactEntry]] = {}

    def _path(self, target_id: str) -> Path:
        return self.root / f"{target_id}.ndjson"

    def _load(self, target_id: str) -> list[FactEntry]:
        if target_id in self._cache:
            return self._cache[target_id]
        facts: list[FactEntry] = []
        path = self._path(target_id)
        if path.exists():
            for line in path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                doc = json.loads(line)
                facts.append(FactEntry(doc["category"], doc["body"], doc.get("source_run", "")))
        self._cache[target_id] = facts
        return facts

    def facts(self, target_id: str) -> tuple[FactEntry, ...]:
        with self._lock:
            return tuple(self._load(target_id))

    def add(self, target_id: str, fact: FactEntry) -> bool:
        """Persist the fact; returns False when an equal one is already stored."""
        with self._lock:
            facts = self._load(target_id)
            if any(f.key == fact.key for f in facts):
                return False
            facts.append(fact)
            with self._path(target_id).open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({
                    "category": fact.category,
                    "body": fact.body,
                    "source_run": fact.source_run,
                }) + "\n")
            return True


# ---------------------------------------------------------------------------
# Single-agent runner

_FACT_LINE = re.compile(
    r"^FACT:\s*(endpoint|config_constraint|auth_requirement|code_location|error_signature)\s*:\s*(.+)$"
)

SINGLE_AGENT_REMINDER = (
    "Reply with exactly one 'TOOL: <name> <args>' line, one 'ACTION: "
    "HTTP|SHELL|WRITE_FILE' block, or a 'FINISH: SUCCESS|FAILURE' block."
)

_MAX_RESULT_CHARS = 4000


def _render_facts(facts: tuple[FactEntry, ...]) -> str:
    if not facts:
        return "(none yet)"
    return "\n".join(f"- [{f.category}] {f.body}" for f in facts)


def run_single_agent(
    manifest: TargetManifest,
    budgets: Budgets,
    backend: Union[ChatBackend, BackendConfig],
    env_factory: EnvFactory,
    evaluator: Optional[Callable[..., Verdict]] = None,
    store: Optional[KnowledgeStore] = None,
    *,
    run_index: int = 1,
    listener=None,
    trace_sink: Optional[list] = None,
) -> RunRecord:
    """One merged-role run: the model plans, reads source, and attacks in a
    single conversation with a shared step budget of max_attempts loops'
    worth of actions. The oracle is consulted after every action, and the
    first confirming action fixes the attempt count at its loop equivalent.
    """
    chat = _as_chat(backend)
    if manifest.source_root is None:
        raise EngineError("single-agent mode needs source access (grey-box only)")
    manifest = _normalize_manifest(manifest, RunMode.GREYBOX_SINGLE)
    if not is_live(manifest.base_url):
        raise EngineError(f"target not reachable at {manifest.base_url}")
    check = evaluator if evaluator is not None else _default_evaluator

    run_id = f"{manifest.target_id}-r{run_index}-single"
    env = env_factory(manifest)
    step_budget = budgets.max_attempts * budgets.exploiter_steps_per_loop

    def build_record(success: bool, steps: int, reason: str, infra: bool = False,
                     summary: str = "") -> RunRecord:
        attempts = min(
            budgets.max_attempts,
            loop_equivalent_attempts(steps, budgets.exploiter_steps_per_loop),
        )
        return RunRecord(
            target_id=manifest.target_id,
            run_index=run_index,
            mode=RunMode.GREYBOX_SINGLE,
            success=success,
            attempts_used=attempts,
            tca=attempts if success else None,
            loop_summaries=(summary,) if summary else (),
            infrastructure_failure=infra,
            failure_reason="" if success else reason,
        )

    try:
        trace = env.begin_attempt(run_id)
        if trace_sink is not None:
            trace_sink.append(trace)
        toolset = SourceToolset(env.source_dir)

        snippet_block = ""
        if manifest.hint is not None:
            try:
                snippet = extract_snippet(env.source_dir, manifest.hint)
                snippet_block = (
                    f"Source excerpt ({snippet.file_path} lines "
                    f"{snippet.line_start}-{snippet.line_end}):\n{snippet.text}\n"
                )
            except (SnippetError, OSError):
                snippet_block = ""
        hint = manifest.hint
        hint_block = (
            f"Reported weakness: {hint.cwe_id} in {hint.file_path} "
            f"lines {hint.line_start}-{hint.line_end}."
            + (f"\nReport note: {hint.note}" if hint.note else "")
        ) if hint else "No vulnerability report is available; only the application itself."

        known = store.facts(manifest.target_id) if store is not None else ()
        template = Template(
            (Path(__file__).parent / "assets" / "prompts" / "single_agent.txt")
            .read_text(encoding="utf-8")
        )
        conversation = Conversation()
        conversation.add_user(template.substitute(
            attack_type=manifest.attack_type.value,
            hint_block=hint_block,
            snippet_block=snippet_block,
            facts=_render_facts(known),
            step_budget=step_budget,
        ))

        steps_used = 0
        reminded = False
        while True:
            text = chat.complete("strategist", conversation)
            conversation.add_assistant(text)

            lines = [l.strip() for l in text.split("\n")]
            header_index = next(
                (i for i, l in enumerate(lines)
                 if TOOL_LINE.match(l) or ACTION_LINE.match(l) or l.startswith("FINISH:")),
                len(lines),
            )
            if store is not None:
                for l in lines[:header_index]:
                    m = _FACT_LINE.match(l)
                    if m:
                        store.add(manifest.target_id, FactEntry(m.group(1), m.group(2).strip(), run_id))

            summary = parse_finish(text, run_id)
            if summary is not None:
                if summary.succeeded_locally:
                    # claims are not verdicts; the oracle already had its say
                    reason = "agent claimed success the oracle did not confirm"
                else:
                    reason = summary.failure_analysis
                return build_record(False, steps_used, reason,
                                    summary=f"single agent finished after {steps_used} steps: {reason}")

            tool = next((TOOL_LINE.match(l) for l in lines if TOOL_LINE.match(l)), None)
            action = next((ACTION_LINE.match(l) for l in lines if ACTION_LINE.match(l)), None)
            if tool is None and action is None:
                if not reminded:
                    reminded = True
                    conversation.add_user(SINGLE_AGENT_REMINDER)
                    continue
                return build_record(
                    False, steps_used,
                    "protocol violation: two consecutive unparseable turns",
                )
            reminded = False

            if tool is not None:
                output = run_source_tool(toolset, tool.group(1), tool.group(2))
                steps_used += 1
            else:
                output = perform_env_action(env, action.group(1), action.group(2), text)
                steps_used += 1
                bodies = listener.evidence_text() if listener is not None else None
                verdict = check(
                    manifest.oracle, manifest.base_url, trace=trace, listener_bodies=bodies,
                )
                if verdict.status is VerdictStatus.SUCCESS:
                    return build_record(
                        True, steps_used, "",
                        summary=f"single agent confirmed on step {steps_used}: {verdict.evidence}",
                    )

            if steps_used >= step_budget:
                return build_record(
                    False, steps_used,
                    f"interaction budget exhausted after {steps_used} steps",
                )
            conversation.add_user(f"RESULT:\n{summarize_output(output, _MAX_RESULT_CHARS)}")
    except BackendError as exc:
        return build_record(False, 0, f"backend failure: {exc}", infra=True)
    finally:
        env.destroy()
