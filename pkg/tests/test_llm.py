"""Backend tests: digests, cassette round-trips, replay determinism."""

import json

import pytest
from hypothesis import given, strategies as st

from vulnproof.llm import (
    AGENT_ROLES,
    BackendConfig,
    BackendError,
    CassetteStore,
    ChatBackend,
    Conversation,
    Message,
    ReplayMiss,
    message_digest,
    normalize_whitespace,
    summarize_output,
)


def scripted(responses):
    """Transport returning canned responses in order."""
    queue = list(responses)
    calls = []

    def call(messages, agent_role):
        calls.append((agent_role, messages[-1]["content"]))
        return queue.pop(0)

    call.calls = calls
    return call


class TestDigest:
    def test_whitespace_insensitive(self):
        a = message_digest("plan  the\nattack")
        b = message_digest("plan the attack")
        assert a == b

    def test_content_sensitive(self):
        assert message_digest("GET /a") != message_digest("GET /b")

    @given(st.text(max_size=200))
    def test_digest_is_stable(self, text):
        assert message_digest(text) == message_digest(text)
        assert len(message_digest(text)) == 64

    @given(st.text(alphabet=" \t\n", max_size=10), st.text(max_size=50), st.text(alphabet=" \t\n", max_size=10))
    def test_padding_never_changes_digest(self, pre, core, post):
        assert message_digest(pre + core + post) == message_digest(core)

    def test_normalize(self):
        assert normalize_whitespace("  a\t b\n\nc ") == "a b c"


class TestConversation:
    def test_last_user(self):
        conv = Conversation("sys")
        conv.add_user("first")
        conv.add_assistant("ok")
        conv.add_user("second")
        assert conv.last_user() == "second"
        assert conv.as_payload()[0] == {"role": "system", "content": "sys"}

    def test_no_user_message(self):
        with pytest.raises(BackendError):
            Conversation("sys").last_user()


class TestCassette:
    def test_record_then_replay_bit_identical(self, tmp_path):
        cassette = tmp_path / "c.ndjson"
        rec = ChatBackend(
            BackendConfig(mode="record", cassette_path=cassette),
            transport=scripted(["RESP-A", "RESP-B"]),
        )
        conv = Conversation("sys")
        conv.add_user("question one")
        assert rec.complete("strategist", conv) == "RESP-A"
        conv.add_assistant("RESP-A")
        conv.add_user("question two")
        assert rec.complete("strategist", conv) == "RESP-B"

        rep = ChatBackend(BackendConfig(mode="replay", cassette_path=cassette))
        conv2 = Conversation("sys")
        conv2.add_user("question one")
        assert rep.complete("strategist", conv2) == "RESP-A"
        conv2.add_assistant("RESP-A")
        conv2.add_user("question two")
        assert rep.complete("strategist", conv2) == "RESP-B"

    def test_cassette_line_schema(self, tmp_path):
        cassette = tmp_path / "c.ndjson"
        rec = ChatBackend(
            BackendConfig(mode="record", cassette_path=cassette), transport=scripted(["R"])
        )
        conv = Conversation()
        conv.add_user("hello   world")
        rec.complete("explorer", conv)
        entry = json.loads(cassette.read_text().strip())
        assert set(entry) == {"role", "turn", "key_digest", "request_excerpt", "response"}
        assert entry["role"] == "explorer"
        assert entry["turn"] == 0
        assert entry["key_digest"] == message_digest("hello world")
        assert entry["request_excerpt"] == "hello world"
        assert entry["response"] == "R"

    def test_record_idempotent_skips_existing_keys(self, tmp_path):
        cassette = tmp_path / "c.ndjson"
        for _ in range(2):
            rec = ChatBackend(
                BackendConfig(mode="record", cassette_path=cassette),
                transport=scripted(["ONLY-ONCE"]),
            )
            conv = Conversation()
            conv.add_user("same prompt")
            assert rec.complete("exploiter", conv) == "ONLY-ONCE"
        lines = [l for l in cassette.read_text().splitlines() if l.strip()]
        assert len(lines) == 1

    def test_replay_miss_raises(self, tmp_path):
        cassette = tmp_path / "c.ndjson"
        rec = ChatBackend(
            BackendConfig(mode="record", cassette_path=cassette), transport=scripted(["R"])
        )
        conv = Conversation()
        conv.add_user("recorded prompt")
        rec.complete("strategist", conv)

        rep = ChatBackend(BackendConfig(mode="replay", cassette_path=cassette))
        conv2 = Conversation()
        conv2.add_user("different prompt")
        with pytest.raises(ReplayMiss):
            rep.complete("strategist", conv2)

    def test_replay_missing_cassette_file(self, tmp_path):
        with pytest.raises(BackendError):
            ChatBackend(BackendConfig(mode="replay", cassette_path=tmp_path / "absent.ndjson"))

    def test_turns_tracked_per_role(self, tmp_path):
        cassette = tmp_path / "c.ndjson"
        rec = ChatBackend(
            BackendConfig(mode="record", cassette_path=cassette),
            transport=scripted(["S0", "E0", "S1"]),
        )
        for role, prompt in (("strategist", "p"), ("explorer", "p"), ("strategist", "p2")):
            conv = Conversation()
            conv.add_user(prompt)
            rec.complete(role, conv)
        store = CassetteStore(cassette)
        assert store.get("strategist", 0, message_digest("p")) == "S0"
        assert store.get("explorer", 0, message_digest("p")) == "E0"
        assert store.get("strategist", 1, message_digest("p2")) == "S1"

    def test_same_turn_different_digest_coexist(self, tmp_path):
        cassette = tmp_path / "c.ndjson"
        rec1 = ChatBackend(
            BackendConfig(mode="record", cassette_path=cassette), transport=scripted(["A"])
        )
        conv = Conversation()
        conv.add_user("variant one")
        rec1.complete("strategist", conv)
        rec2 = ChatBackend(
            BackendConfig(mode="record", cassette_path=cassette), transport=scripted(["B"])
        )
        conv = Conversation()
        conv.add_user("variant two")
        rec2.complete("strategist", conv)

        store = CassetteStore(cassette)
        assert len(store) == 2

    def test_unknown_role_rejected(self, tmp_path):
        rec = ChatBackend(
            BackendConfig(mode="record", cassette_path=tmp_path / "c.ndjson"),
            transport=scripted(["R"]),
        )
        conv = Conversation()
        conv.add_user("p")
        with pytest.raises(BackendError):
            rec.complete("oracle", conv)

    def test_live_requires_configuration(self, monkeypatch):
        monkeypatch.delenv("VULNPROOF_LLM_URL", raising=False)
        monkeypatch.delenv("VULNPROOF_LLM_MODEL", raising=False)
        with pytest.raises(BackendError):
            ChatBackend(BackendConfig(mode="live"))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            BackendConfig(mode="offline")


class TestSummarize:
    def test_short_text_passthrough(self):
        assert summarize_output("tiny", 100) == "tiny"

    def test_truncation_keeps_head_and_tail(self):
        text = "HEAD" + "x" * 5000 + "TAIL"
        out = summarize_output(text, 200)
        assert len(out) <= 200
        assert out.startswith("HEAD")
        assert out.endswith("TAIL")
        assert "omitted" in out

    @given(st.text(min_size=0, max_size=3000), st.integers(1, 500))
    def test_limit_always_respected(self, text, limit):
        assert len(summarize_output(text, limit)) <= limit

    def test_backend_summary_used_when_it_fits(self, tmp_path):
        cassette = tmp_path / "c.ndjson"
        backend = ChatBackend(
            BackendConfig(mode="record", cassette_path=cassette),
            transport=scripted(["short summary"]),
        )
        out = summarize_output("y" * 1000, 100, backend=backend)
        assert out == "short summary"

    def test_backend_failure_falls_back(self, tmp_path):
        cassette = tmp_path / "empty.ndjson"
        cassette.write_text("")
        backend = ChatBackend(BackendConfig(mode="replay", cassette_path=cassette))
        text = "A" * 400 + "Z" * 400
        out = summarize_output(text, 120, backend=backend)
        assert len(out) <= 120
        assert out.startswith("A") and out.endswith("Z")

    def test_default_role_valid(self):
        assert "exploiter" in AGENT_ROLES

    def test_roles_frozen(self):
        assert AGENT_ROLES == ("strategist", "explorer", "exploiter", "poc_gen")
