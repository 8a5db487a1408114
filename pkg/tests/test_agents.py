"""Role behavior tests: envelope grammar, source tools, action loops."""

import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given, strategies as st

from vulnproof.agents import (
    AgentEnvelope,
    EnvelopeError,
    OutcomeSummary,
    SourceToolset,
    explorer_answer,
    exploiter_run,
    parse_agent_envelope,
    request_envelope,
    strategist_decide,
)
from vulnproof.domain import (
    ActionKind,
    EntryKind,
    ExploitPlan,
    PlanStep,
    WorkingContext,
    parse_target_manifest,
)
from vulnproof.llm import BackendConfig, ChatBackend, Conversation
from vulnproof.sandbox import CONNECTION_AUDIT, SandboxViolation, create_env


def scripted_backend(responses):
    queue = list(responses)
    calls = []

    def transport(messages, agent_role):
        calls.append((agent_role, messages[-1]["content"]))
        return queue.pop(0)

    backend = ChatBackend(BackendConfig(mode="live"), transport=transport)
    backend.test_calls = calls
    return backend


@pytest.fixture
def echo_server():
    class Handler(BaseHTTPRequestHandler):
        def _respond(self):
            body = f"{self.command} {self.path}".encode()
            self.send_response(200)
            self.send_header("Content-Type", "text/plain")
            self.end_headers()
            self.wfile.write(body)

        do_GET = _respond
        do_POST = _respond

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def make_env(tmp_path, base_url, source=False):
    doc = {
        "target_id": "demo",
        "base_url": base_url,
        "attack_type": "file_access",
        "oracle": {
            "oracle_id": "demo-oracle",
            "kind": "file_access",
            "params": {"secret_token": "FLAG-x"},
        },
    }
    if source:
        src = tmp_path / "srctree"
        (src / "app").mkdir(parents=True)
        (src / "app" / "main.py").write_text(
            "import os\n\n\ndef handler(path):\n    # nonce check happens upstream\n    return open(path).read()\n"
        )
        doc["source_root"] = str(src)
        doc["hint"] = {
            "cwe_id": "CWE-22",
            "file_path": "app/main.py",
            "line_start": 4,
            "line_end": 6,
        }
    else:
        doc["mode"] = "blackbox_multi"
    return create_env(parse_target_manifest(doc), workdir_root=tmp_path)


class TestEnvelopeParsing:
    def test_explore_single_question(self):
        env = parse_agent_envelope("DECISION: EXPLORE\nQ1: Does registration require a nonce?")
        assert env.decision == "explore"
        assert env.questions == ("Does registration require a nonce?",)

    def test_explore_multiple_questions(self):
        text = "DECISION: EXPLORE\nQ1: first?\nQ2: second?\nQ3: third?"
        assert parse_agent_envelope(text).questions == ("first?", "second?", "third?")

    def test_execute_with_plan(self):
        text = (
            "DECISION: EXECUTE\n"
            "PLAN: register an administrator\n"
            "STEP 1 [http]: GET /register\n"
            "STEP 2 [http]: POST /register\\nContent-Type: application/x-www-form-urlencoded\\n\\nrole=administrator => role accepted\n"
            "STEP 3 [shell]: cat notes.txt\n"
        )
        env = parse_agent_envelope(text)
        assert env.decision == "execute"
        assert env.plan.objective == "register an administrator"
        assert len(env.plan.steps) == 3
        assert env.plan.steps[0].action_kind is ActionKind.HTTP
        assert env.plan.steps[1].payload.count("\n") == 3
        assert env.plan.steps[1].expected_signal == "role accepted"
        assert env.plan.steps[2].action_kind is ActionKind.SHELL

    def test_abort(self):
        env = parse_agent_envelope("DECISION: ABORT\nREASON: dependency source unavailable")
        assert env.decision == "abort"
        assert env.reason == "dependency source unavailable"

    def test_execute_empty_plan_is_mismatch(self):
        with pytest.raises(EnvelopeError, match="decision/payload mismatch"):
            parse_agent_envelope("DECISION: EXECUTE\nPLAN: something")
        with pytest.raises(EnvelopeError, match="decision/payload mismatch"):
            parse_agent_envelope("DECISION: EXECUTE")

    def test_wrong_variant_payload_is_mismatch(self):
        with pytest.raises(EnvelopeError, match="decision/payload mismatch"):
            parse_agent_envelope("DECISION: EXPLORE\nQ1: ok?\nREASON: also this")

    def test_fenced_block_accepted(self):
        text = "Here is my move:\n```\nDECISION: ABORT\nREASON: nothing reachable\n```\nthanks"
        assert parse_agent_envelope(text).decision == "abort"

    def test_surrounding_prose_ignored(self):
        text = "I think we should look closer.\nDECISION: EXPLORE\nQ1: where is auth?\nLet me know."
        env = parse_agent_envelope(text)
        assert env.questions == ("where is auth?",)

    def test_no_decision_header(self):
        with pytest.raises(EnvelopeError, match="DECISION"):
            parse_agent_envelope("Q1: lost question")

    def test_bad_step_numbering(self):
        text = "DECISION: EXECUTE\nPLAN: x\nSTEP 1 [http]: GET /\nSTEP 3 [http]: GET /a"
        with pytest.raises(EnvelopeError, match="numbered"):
            parse_agent_envelope(text)

    def test_raw_preserved(self):
        text = "DECISION: ABORT\nREASON: done"
        assert parse_agent_envelope(text).raw == text

    @given(st.text(max_size=300))
    def test_never_silently_succeeds_without_header(self, text):
        if "DECISION:" in text:
            return
        with pytest.raises(EnvelopeError):
            parse_agent_envelope(text)


class TestRequestEnvelope:
    def test_one_reprompt_then_success(self):
        backend = scripted_backend(["sure, let me think", "DECISION: ABORT\nREASON: x"])
        conv = Conversation()
        conv.add_user("decide")
        env = request_envelope(backend, conv)
        assert env.decision == "abort"
        # the corrective reminder became the second request's last user message
        assert "not a valid envelope" in backend.test_calls[1][1]

    def test_two_failures_raise(self):
        backend = scripted_backend(["nope", "still nope"])
        conv = Conversation()
        conv.add_user("decide")
        with pytest.raises(EnvelopeError):
            request_envelope(backend, conv)


class TestStrategistDecide:
    def test_prompt_carries_context_and_hint(self, tmp_path):
        backend = scripted_backend(["DECISION: EXECUTE\nPLAN: go\nSTEP 1 [http]: GET /x"])
        ctx = WorkingContext()
        ctx.append(
            __import__("vulnproof.domain", fromlist=["ContextEntry"]).ContextEntry(
                loop_index=0, kind=EntryKind.EVALUATOR_FEEDBACK, body="attempt rejected"
            )
        )
        hint = parse_target_manifest(
            {
                "target_id": "t",
                "base_url": "http://127.0.0.1:1",
                "attack_type": "privilege_escalation",
                "source_root": str(tmp_path),
                "hint": {"cwe_id": "CWE-269", "file_path": "x.php", "line_start": 1, "line_end": 2},
                "oracle": {
                    "oracle_id": "o",
                    "kind": "privilege_escalation",
                    "params": {"probe_request": "GET /s", "admin_marker": "m"},
                },
            }
        ).hint
        env = strategist_decide(ctx, hint, None, backend, attack_type="privilege_escalation")
        assert env.decision == "execute"
        prompt = backend.test_calls[0][1]
        assert "CWE-269" in prompt
        assert "attempt rejected" in prompt
        assert "privilege_escalation" in prompt

    def test_blackbox_empty_context_parses(self):
        backend = scripted_backend(["DECISION: EXECUTE\nPLAN: probe\nSTEP 1 [http]: GET /"])
        env = strategist_decide(WorkingContext(), None, None, backend, attack_type="file_access")
        assert isinstance(env, AgentEnvelope)
        assert "No vulnerability report" in backend.test_calls[0][1]


@pytest.fixture
def source_tree(tmp_path):
    root = tmp_path / "tree"
    (root / "app").mkdir(parents=True)
    (root / "app" / "auth.py").write_text(
        "def verify_nonce(token):\n    return token == session['nonce']\n\n\ndef login(user):\n    pass\n"
    )
    (root / "app" / "views.py").write_text("ROUTES = ['/register', '/login']\n")
    (root / "README.md").write_text("demo app\n")
    (root / "logo.bin").write_bytes(b"\x00\x01\x02")
    return root


class TestSourceToolset:
    def test_list_dir_sorted_with_dir_suffix(self, source_tree):
        tools = SourceToolset(source_tree)
        assert tools.list_dir(".").splitlines() == ["README.md", "app/", "logo.bin"]

    def test_read_file_numbered_range(self, source_tree):
        tools = SourceToolset(source_tree)
        out = tools.read_file("app/auth.py", 1, 2)
        assert out.splitlines() == [
            "    1| def verify_nonce(token):",
            "    2|     return token == session['nonce']",
        ]

    def test_search_text_reports_locations(self, source_tree):
        tools = SourceToolset(source_tree)
        out = tools.search_text("nonce")
        assert "app/auth.py:1:" in out and "app/auth.py:2:" in out

    def test_search_skips_binary(self, source_tree):
        tools = SourceToolset(source_tree)
        assert "logo.bin" not in tools.search_text("\x01")

    def test_path_exists(self, source_tree):
        tools = SourceToolset(source_tree)
        assert tools.path_exists("app/views.py").startswith("exists (file)")
        assert tools.path_exists("app").startswith("exists (directory)")
        assert tools.path_exists("missing.txt").startswith("absent")

    def test_escape_rejected_as_error_string(self, source_tree):
        tools = SourceToolset(source_tree)
        for op in (tools.list_dir, lambda p: tools.read_file(p), tools.path_exists):
            assert "escapes the source tree" in op("../outside")

    def test_calls_counted(self, source_tree):
        tools = SourceToolset(source_tree)
        tools.list_dir(".")
        tools.path_exists("README.md")
        assert tools.calls == 2


class TestExplorerAnswer:
    def test_tool_loop_then_answer_with_verbatim_excerpt(self, source_tree):
        backend = scripted_backend(
            [
                "TOOL: search_text nonce",
                "TOOL: read_file app/auth.py 1-2",
                "ANSWER: A nonce comparison guards login.\nEXCERPT: app/auth.py 1-2",
            ]
        )
        entry = explorer_answer("Is a nonce validated?", source_tree, backend, tool_budget=8)
        assert entry.kind is EntryKind.QA
        assert entry.question == "Is a nonce validated?"
        assert "nonce comparison" in entry.body
        assert len(entry.excerpts) == 1
        expected = "\n".join((source_tree / "app" / "auth.py").read_text().splitlines()[0:2])
        assert entry.excerpts[0].text == expected
        assert entry.excerpts[0].file_path == "app/auth.py"

    def test_results_fed_back(self, source_tree):
        backend = scripted_backend(["TOOL: path_exists app/views.py", "ANSWER: views module exists."])
        explorer_answer("Does views.py exist?", source_tree, backend)
        assert "RESULT:" in backend.test_calls[1][1]
        assert "exists (file)" in backend.test_calls[1][1]

    def test_budget_exhaustion_flags_incomplete(self, source_tree):
        backend = scripted_backend(["TOOL: list_dir .", "ANSWER: only partial survey done."])
        entry = explorer_answer("What modules exist?", source_tree, backend, tool_budget=1)
        assert entry.body.startswith("[incomplete]")
        assert "reply with ANSWER" in backend.test_calls[1][1]

    def test_tool_after_exhausted_budget_forces_incomplete_entry(self, source_tree):
        backend = scripted_backend(["TOOL: list_dir .", "TOOL: list_dir app"])
        entry = explorer_answer("What modules exist?", source_tree, backend, tool_budget=1)
        assert entry.body.startswith("[incomplete]")

    def test_malformed_turn_gets_one_reminder(self, source_tree):
        backend = scripted_backend(["let me look around", "ANSWER: nothing notable."])
        entry = explorer_answer("Anything odd?", source_tree, backend)
        assert entry.body == "nothing notable."
        assert "TOOL" in backend.test_calls[1][1]

    def test_bogus_excerpt_skipped(self, source_tree):
        backend = scripted_backend(["ANSWER: fine.\nEXCERPT: app/auth.py 900-950\nEXCERPT: ../etc 1-2"])
        entry = explorer_answer("q?", source_tree, backend)
        assert entry.excerpts == ()

    def test_never_touches_network(self, source_tree):
        before = len(CONNECTION_AUDIT)
        backend = scripted_backend(["ANSWER: static analysis only."])
        explorer_answer("q?", source_tree, backend)
        assert len(CONNECTION_AUDIT) == before


def one_step_plan(payload="GET /health"):
    return ExploitPlan(
        objective="probe",
        steps=(PlanStep(description=payload, action_kind=ActionKind.HTTP, payload=payload),),
    )


class TestExploiterRun:
    def test_single_http_action_success(self, tmp_path, echo_server):
        env = make_env(tmp_path, echo_server)
        backend = scripted_backend(
            ["ACTION: HTTP\nGET /health", "FINISH: SUCCESS\nOBSERVATION: target answered"]
        )
        try:
            trace, summary = exploiter_run(one_step_plan(), env, backend, step_budget=25)
            assert summary.succeeded_locally
            assert summary.observations == ["target answered"]
            assert summary.trace_ref == trace.run_id
            assert trace.interaction_count() == 1
            assert env.interactions == 1
            assert "GET /health" in backend.test_calls[1][1]
        finally:
            env.destroy()

    def test_shell_failure_analysis(self, tmp_path, echo_server):
        env = make_env(tmp_path, echo_server)
        backend = scripted_backend(
            [
                "ACTION: SHELL\nfalse",
                "FINISH: FAILURE\nOBSERVATION: command failed\nANALYSIS: exit code 1 from probe",
            ]
        )
        try:
            trace, summary = exploiter_run(one_step_plan(), env, backend)
            assert not summary.succeeded_locally
            assert "exit code 1" in summary.failure_analysis
            assert "exit code: 1" in backend.test_calls[1][1]
        finally:
            env.destroy()

    def test_step_budget_enforced(self, tmp_path, echo_server):
        env = make_env(tmp_path, echo_server)
        backend = scripted_backend(
            [
                "ACTION: HTTP\nGET /a",
                "ACTION: HTTP\nGET /b",
                "FINISH: FAILURE\nANALYSIS: out of moves",
            ]
        )
        try:
            trace, summary = exploiter_run(one_step_plan(), env, backend, step_budget=2)
            assert not summary.succeeded_locally
            assert env.interactions == 2
            assert "budget exhausted" in backend.test_calls[2][1]
        finally:
            env.destroy()

    def test_budget_exhausted_without_finish_forces_failure(self, tmp_path, echo_server):
        env = make_env(tmp_path, echo_server)
        backend = scripted_backend(["ACTION: HTTP\nGET /a", "ACTION: HTTP\nGET /b"])
        try:
            trace, summary = exploiter_run(one_step_plan(), env, backend, step_budget=1)
            assert not summary.succeeded_locally
            assert "ran out of actions" in summary.failure_analysis
        finally:
            env.destroy()

    def test_two_protocol_violations_force_failure(self, tmp_path, echo_server):
        env = make_env(tmp_path, echo_server)
        backend = scripted_backend(["hello there", "what should I do?"])
        try:
            trace, summary = exploiter_run(one_step_plan(), env, backend)
            assert not summary.succeeded_locally
            assert "protocol violation" in summary.failure_analysis
            assert trace.interaction_count() == 0
        finally:
            env.destroy()

    def test_write_file_action(self, tmp_path, echo_server):
        env = make_env(tmp_path, echo_server)
        backend = scripted_backend(
            [
                "ACTION: WRITE_FILE notes/tool.py\nprint('hi')\n",
                "FINISH: SUCCESS\nOBSERVATION: wrote helper",
            ]
        )
        try:
            exploiter_run(one_step_plan(), env, backend)
            assert (env.workdir / "notes" / "tool.py").read_text() == "print('hi')\n"
            assert "wrote tool.py" in backend.test_calls[1][1]
        finally:
            env.destroy()

    def test_blocked_request_reported_not_fatal(self, tmp_path, echo_server):
        env = make_env(tmp_path, echo_server)
        backend = scripted_backend(
            [
                "ACTION: HTTP\nGET http://127.0.0.1:1/outside",
                "FINISH: FAILURE\nANALYSIS: egress blocked",
            ]
        )
        try:
            trace, summary = exploiter_run(one_step_plan(), env, backend)
            assert "blocked by environment policy" in backend.test_calls[1][1]
            assert trace.interaction_count() == 0
        finally:
            env.destroy()

    def test_dead_env_rejected(self, tmp_path, echo_server):
        env = make_env(tmp_path, echo_server)
        env.destroy()
        backend = scripted_backend([])
        with pytest.raises(SandboxViolation):
            exploiter_run(one_step_plan(), env, backend)

    def test_source_note_present_in_greybox(self, tmp_path, echo_server):
        env = make_env(tmp_path, echo_server, source=True)
        backend = scripted_backend(["FINISH: FAILURE\nANALYSIS: nothing attempted"])
        try:
            exploiter_run(one_step_plan(), env, backend)
            assert "./source" in backend.test_calls[0][1]
        finally:
            env.destroy()


class TestOutcomeSummary:
    def test_failure_requires_analysis(self):
        with pytest.raises(ValueError):
            OutcomeSummary(succeeded_locally=False, observations=["x"])

    def test_success_needs_no_analysis(self):
        s = OutcomeSummary(succeeded_locally=True, observations=["ok"], trace_ref="r1")
        assert s.failure_analysis is None
