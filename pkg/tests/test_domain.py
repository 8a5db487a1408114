"""Data-model tests: manifests, snippets, traces, context, records."""

import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from vulnproof.domain import (
    ActionKind,
    AttackType,
    CodeSnippet,
    ContextEntry,
    EntryKind,
    EventKind,
    ExecutionTrace,
    ExploitPlan,
    ManifestError,
    OracleSpec,
    PlanStep,
    RunMode,
    RunRecord,
    SnippetError,
    TargetManifest,
    TraceError,
    TraceEvent,
    Verdict,
    VerdictStatus,
    VulnerabilityHint,
    extract_snippet,
    manifest_to_dict,
    manifest_to_json,
    parse_target_manifest,
    snippet_for_range,
)

TREES = Path(__file__).resolve().parents[1] / "src" / "vulnproof" / "fixtures" / "trees"


def make_manifest_doc(**overrides):
    doc = {
        "target_id": "regrole",
        "base_url": "http://127.0.0.1:8801",
        "source_root": str(TREES / "regrole"),
        "hint": {
            "cwe_id": "CWE-269",
            "file_path": "class-wpfep-registration.php",
            "line_start": 77,
            "line_end": 88,
        },
        "attack_type": "privilege_escalation",
        "oracle": {
            "oracle_id": "regrole-priv",
            "kind": "privilege_escalation",
            "params": {"probe_request": "GET /__state/role?user=eve", "admin_marker": "administrator"},
        },
        "reset_hook": "POST http://127.0.0.1:8801/__reset",
        "mode": "greybox_multi",
    }
    doc.update(overrides)
    return doc


class TestManifestParsing:
    def test_round_trip(self):
        m = parse_target_manifest(json.dumps(make_manifest_doc()))
        assert m.target_id == "regrole"
        assert m.attack_type is AttackType.PRIVILEGE_ESCALATION
        assert m.mode is RunMode.GREYBOX_MULTI
        assert m.hint.cwe_id == "CWE-269"
        assert m.hint.line_start == 77 and m.hint.line_end == 88
        again = parse_target_manifest(manifest_to_json(m))
        assert again == m

    def test_to_dict_keys_match_input_schema(self):
        m = parse_target_manifest(make_manifest_doc())
        d = manifest_to_dict(m)
        assert set(d) == {
            "target_id", "base_url", "source_root", "hint",
            "attack_type", "oracle", "reset_hook", "mode",
        }
        assert set(d["hint"]) == {"cwe_id", "file_path", "line_start", "line_end"}

    @pytest.mark.parametrize("key", ["target_id", "base_url", "attack_type", "oracle"])
    def test_missing_required_field_names_the_field(self, key):
        doc = make_manifest_doc()
        del doc[key]
        with pytest.raises(ManifestError) as exc:
            parse_target_manifest(doc)
        assert exc.value.field_path == key

    def test_bad_cwe_format(self):
        doc = make_manifest_doc()
        doc["hint"]["cwe_id"] = "cwe269"
        with pytest.raises(ManifestError) as exc:
            parse_target_manifest(doc)
        assert exc.value.field_path == "hint.cwe_id"

    def test_line_range_inverted(self):
        doc = make_manifest_doc()
        doc["hint"]["line_end"] = 5
        with pytest.raises(ManifestError) as exc:
            parse_target_manifest(doc)
        assert exc.value.field_path == "hint.line_end"

    def test_absolute_hint_path_rejected(self):
        doc = make_manifest_doc()
        doc["hint"]["file_path"] = "/etc/passwd"
        with pytest.raises(ManifestError) as exc:
            parse_target_manifest(doc)
        assert exc.value.field_path == "hint.file_path"

    def test_dotdot_hint_path_rejected(self):
        doc = make_manifest_doc()
        doc["hint"]["file_path"] = "../outside.php"
        with pytest.raises(ManifestError):
            parse_target_manifest(doc)

    def test_oracle_kind_must_match_attack_type(self):
        doc = make_manifest_doc()
        doc["oracle"]["kind"] = "file_access"
        doc["oracle"]["params"] = {"secret_token": "x"}
        with pytest.raises(ManifestError) as exc:
            parse_target_manifest(doc)
        assert exc.value.field_path == "oracle.kind"

    def test_oracle_missing_params(self):
        doc = make_manifest_doc()
        doc["oracle"]["params"] = {}
        with pytest.raises(ManifestError) as exc:
            parse_target_manifest(doc)
        assert exc.value.field_path == "oracle.params"
        assert "probe_request" in str(exc.value)

    def test_greybox_requires_source_and_hint(self):
        doc = make_manifest_doc()
        del doc["source_root"]
        with pytest.raises(ManifestError) as exc:
            parse_target_manifest(doc)
        assert exc.value.field_path == "source_root"
        doc = make_manifest_doc(hint=None)
        with pytest.raises(ManifestError) as exc:
            parse_target_manifest(doc)
        assert exc.value.field_path == "hint"

    def test_blackbox_omits_source_and_hint(self):
        doc = make_manifest_doc(mode="blackbox_multi")
        del doc["source_root"]
        doc["hint"] = None
        m = parse_target_manifest(doc)
        assert m.mode is RunMode.BLACKBOX_MULTI
        assert m.source_root is None and m.hint is None
        assert not m.greybox

    def test_unknown_mode(self):
        with pytest.raises(ManifestError) as exc:
            parse_target_manifest(make_manifest_doc(mode="whitebox"))
        assert exc.value.field_path == "mode"

    def test_unknown_attack_type(self):
        with pytest.raises(ManifestError) as exc:
            parse_target_manifest(make_manifest_doc(attack_type="xss"))
        assert exc.value.field_path == "attack_type"

    def test_invalid_json_text(self):
        with pytest.raises(ManifestError) as exc:
            parse_target_manifest("{not json")
        assert exc.value.field_path == "$"

    def test_bad_base_url(self):
        with pytest.raises(ManifestError) as exc:
            parse_target_manifest(make_manifest_doc(base_url="ftp://x"))
        assert exc.value.field_path == "base_url"

    def test_validate_paths_missing_root(self, tmp_path):
        m = parse_target_manifest(make_manifest_doc(source_root=str(tmp_path / "gone")))
        with pytest.raises(ManifestError) as exc:
            m.validate_paths()
        assert exc.value.field_path == "source_root"


class TestSnippet:
    def test_pinned_hint_range_matches_independent_slice(self):
        # Oracle: slice the file directly; extract_snippet must agree exactly.
        src = TREES / "regrole"
        hint = VulnerabilityHint(
            cwe_id="CWE-269",
            file_path="class-wpfep-registration.php",
            line_start=77,
            line_end=88,
        )
        raw_lines = (src / hint.file_path).read_text(encoding="utf-8").splitlines()
        expected = "\n".join(raw_lines[76:88])
        snip = extract_snippet(src, hint)
        assert snip.text == expected
        assert len(snip.text.splitlines()) == 12
        assert "get_role" in snip.text
        assert snip.clamped is False
        assert (snip.line_start, snip.line_end) == (77, 88)

    def test_clamp_past_eof(self, tmp_path):
        f = tmp_path / "short.py"
        f.write_text("a\nb\nc\n", encoding="utf-8")
        snip = snippet_for_range(tmp_path, "short.py", 2, 99)
        assert snip.text == "b\nc"
        assert snip.clamped is True
        assert snip.line_end == 3

    def test_start_past_eof_is_error(self, tmp_path):
        (tmp_path / "short.py").write_text("a\n", encoding="utf-8")
        with pytest.raises(SnippetError):
            snippet_for_range(tmp_path, "short.py", 5, 9)

    def test_missing_file(self, tmp_path):
        with pytest.raises(SnippetError):
            snippet_for_range(tmp_path, "gone.py", 1, 2)

    def test_binary_rejected(self, tmp_path):
        (tmp_path / "blob.bin").write_bytes(b"\x00\x01\x02")
        with pytest.raises(SnippetError):
            snippet_for_range(tmp_path, "blob.bin", 1, 1)

    @given(
        lines=st.lists(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=30), min_size=1, max_size=40),
        data=st.data(),
    )
    def test_extraction_is_exact_slice(self, tmp_path_factory, lines, data):
        start = data.draw(st.integers(1, len(lines)))
        end = data.draw(st.integers(start, len(lines)))
        root = tmp_path_factory.mktemp("snip")
        (root / "f.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        snip = snippet_for_range(root, "f.txt", start, end)
        assert snip.text == "\n".join(lines[start - 1 : end])
        assert not snip.clamped


class TestWorkingContext:
    def test_append_only_and_ordered(self):
        from vulnproof.domain import WorkingContext

        ctx = WorkingContext()
        ctx.append(ContextEntry(0, EntryKind.OBSERVATION, "saw a login form"))
        ctx.append(ContextEntry(0, EntryKind.QA, "uses nonce", question="is there CSRF?"))
        ctx.append(ContextEntry(1, EntryKind.FAILURE_SUMMARY, "attempt 1 got 200 but no role change"))
        assert len(ctx) == 3
        with pytest.raises(ValueError):
            ctx.append(ContextEntry(0, EntryKind.OBSERVATION, "time travel"))
        assert [e.kind for e in ctx.of_kind(EntryKind.QA)] == [EntryKind.QA]

    @given(st.lists(st.integers(0, 6), min_size=1, max_size=30))
    def test_loop_indices_nondecreasing_property(self, raw):
        from vulnproof.domain import WorkingContext

        ctx = WorkingContext()
        accepted = []
        for i in raw:
            try:
                ctx.append(ContextEntry(i, EntryKind.OBSERVATION, "x"))
                accepted.append(i)
            except ValueError:
                pass
        assert accepted == sorted(accepted)
        assert [e.loop_index for e in ctx.entries] == accepted


class TestTrace:
    def test_round_trip_ndjson(self, tmp_path):
        t = ExecutionTrace("r1")
        t.add_note("attempt 1 start")
        t.add_http("POST /register", "HTTP/1.1 200 OK")
        t.add_command("id", 0, "uid=0(root)", "")
        path = tmp_path / "trace.ndjson"
        t.write(path)
        back = ExecutionTrace.from_ndjson("r1", path.read_text(encoding="utf-8"))
        assert [e.to_dict() for e in back.events] == [e.to_dict() for e in t.events]
        assert back.interaction_count() == 2

    def test_seq_strictly_increasing(self):
        t = ExecutionTrace("r")
        for _ in range(5):
            t.add_http("GET /", "200")
        seqs = [e.seq for e in t.events]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
        t.validate()

    def test_command_outputs_adjacency(self):
        t = ExecutionTrace("r")
        t.add_command("ls", 0, "a b", "")
        kinds = [e.kind for e in t.events]
        assert kinds == [EventKind.COMMAND, EventKind.STDOUT, EventKind.STDERR]
        assert t.events[0].exit_code == 0

    def test_validate_rejects_orphan_stdout(self):
        t = ExecutionTrace("r")
        t._events.append(TraceEvent(1, "2026-01-01T00:00:00+00:00", EventKind.STDOUT, "x"))
        with pytest.raises(TraceError):
            t.validate()

    def test_validate_rejects_interleaved_command(self):
        t = ExecutionTrace("r")
        t._events.append(TraceEvent(1, "t", EventKind.COMMAND, "ls", 0))
        t._events.append(TraceEvent(2, "t", EventKind.COMMAND, "id", 0))
        with pytest.raises(TraceError):
            t.validate()

    @given(st.lists(st.sampled_from(["http", "cmd", "note"]), max_size=25))
    def test_interaction_count_matches_env_calls(self, ops):
        t = ExecutionTrace("r")
        expected = 0
        for op in ops:
            if op == "http":
                t.add_http("GET /x", "200")
                expected += 1
            elif op == "cmd":
                t.add_command("true", 0, "", "")
                expected += 1
            else:
                t.add_note("n")
        t.validate()
        assert t.interaction_count() == expected


class TestPlanAndVerdict:
    def test_plan_requires_steps(self):
        with pytest.raises(ValueError):
            ExploitPlan(objective="o", steps=())
        plan = ExploitPlan(
            objective="create admin user",
            steps=(PlanStep("send it", ActionKind.HTTP, "POST /register"),),
        )
        assert plan.steps[0].action_kind is ActionKind.HTTP

    def test_empty_payload_rejected(self):
        with pytest.raises(ValueError):
            PlanStep("noop", ActionKind.SHELL, "   ")

    def test_success_verdict_needs_evidence(self):
        with pytest.raises(ValueError):
            Verdict(VerdictStatus.SUCCESS, "o1", "")
        v = Verdict(VerdictStatus.SUCCESS, "o1", "role=administrator observed")
        assert v.status is VerdictStatus.SUCCESS
        assert Verdict(VerdictStatus.FAILURE, "o1", "").status is VerdictStatus.FAILURE
        assert Verdict(VerdictStatus.WITHHELD, "o1", "").status is VerdictStatus.WITHHELD


class TestRunRecord:
    def test_success_iff_tca(self):
        with pytest.raises(ValueError):
            RunRecord("t", 1, RunMode.GREYBOX_MULTI, success=True, attempts_used=2, tca=None)
        with pytest.raises(ValueError):
            RunRecord("t", 1, RunMode.GREYBOX_MULTI, success=False, attempts_used=2, tca=2)
        r = RunRecord("t", 1, RunMode.GREYBOX_MULTI, success=True, attempts_used=3, tca=2)
        assert r.tca == 2

    def test_tca_bounds(self):
        with pytest.raises(ValueError):
            RunRecord("t", 1, RunMode.GREYBOX_MULTI, success=True, attempts_used=2, tca=3)

    def test_dict_round_trip(self):
        r = RunRecord(
            "t", 2, RunMode.GREYBOX_SINGLE, success=False, attempts_used=5,
            loop_summaries=("a", "b"), infrastructure_failure=True, failure_reason="target down",
        )
        assert RunRecord.from_dict(json.loads(json.dumps(r.to_dict()))) == r
