"""Fixture target behavior: determinism, reset, and the planted flaws."""

import json

import pytest
import requests

from vulnproof.domain import RunMode, parse_target_manifest, manifest_to_json
from vulnproof.fixtures import (
    FIXTURE_NAMES,
    fixture_manifest,
    serve_fixture,
    start_fixture,
    stop_fixture,
)
from vulnproof.fixtures.seeds import derive, state_dir
from vulnproof.fixtures.toolexec import secret_path


@pytest.fixture(scope="module")
def regrole_site():
    with serve_fixture("regrole", seed=7) as handle:
        yield handle


@pytest.fixture(scope="module")
def toolexec_site():
    with serve_fixture("toolexec", seed=7) as handle:
        yield handle


@pytest.fixture(scope="module")
def fileserve_site():
    with serve_fixture("fileserve", seed=7) as handle:
        yield handle


def post_form(base, path, data):
    return requests.post(base + path, data=data, timeout=10)


class TestSeeds:
    def test_derivation_deterministic(self):
        assert derive("x", 1, "secret") == derive("x", 1, "secret")
        assert derive("x", 1, "secret") != derive("x", 2, "secret")
        assert derive("x", 1, "a") != derive("x", 1, "b")

    def test_state_dir_pinned(self):
        assert str(state_dir("toolexec", 3)) == "/tmp/vulnproof-fixtures/toolexec-3"


class TestRegrole:
    def test_form_carries_nonce_and_marker(self, regrole_site):
        html = requests.get(regrole_site.base_url + "/register", timeout=10).text
        assert 'name="wpfep_registration" value="1"' in html
        assert 'name="_wpnonce"' in html
        assert derive("regrole", 7, "nonce", 10) in html
        # relative action keeps behavior port independent
        assert 'action="register"' in html

    def test_nonce_constant_per_seed(self, regrole_site):
        first = requests.get(regrole_site.base_url + "/register", timeout=10).text
        second = requests.get(regrole_site.base_url + "/register", timeout=10).text
        assert first == second

    def test_naive_admin_post_fails_without_explicit_rejection(self, regrole_site):
        requests.post(regrole_site.base_url + "/__reset", timeout=10)
        resp = post_form(
            regrole_site.base_url,
            "/register",
            {"user_login": "mallory", "user_email": "m@x.test", "user_pass": "p", "role": "administrator"},
        )
        # no marker, no nonce: silently ignored, no user appears
        assert resp.status_code == 200
        assert "wpfep-error" not in resp.text and "wpfep-message" not in resp.text
        state = requests.get(regrole_site.base_url + "/__state/last_registration", timeout=10).json()
        assert state == {}

    def test_bad_nonce_generic_failure(self, regrole_site):
        resp = post_form(
            regrole_site.base_url,
            "/register",
            {
                "wpfep_registration": "1",
                "_wpnonce": "wrong",
                "user_login": "mallory",
                "user_email": "m@x.test",
                "user_pass": "p",
                "role": "administrator",
            },
        )
        assert "Registration failed: please reload the form and try again." in resp.text

    def test_full_post_with_role_succeeds(self, regrole_site):
        requests.post(regrole_site.base_url + "/__reset", timeout=10)
        nonce = derive("regrole", 7, "nonce", 10)
        resp = post_form(
            regrole_site.base_url,
            "/register",
            {
                "wpfep_registration": "1",
                "_wpnonce": nonce,
                "user_login": "eve",
                "user_email": "eve@x.test",
                "user_pass": "p",
                "role": "administrator",
            },
        )
        assert "Registration complete." in resp.text
        state = requests.get(regrole_site.base_url + "/__state/last_registration", timeout=10).json()
        assert state == {"user": "eve", "role": "administrator"}

    def test_unknown_role_falls_back_to_subscriber(self, regrole_site):
        requests.post(regrole_site.base_url + "/__reset", timeout=10)
        nonce = derive("regrole", 7, "nonce", 10)
        post_form(
            regrole_site.base_url,
            "/register",
            {
                "wpfep_registration": "1",
                "_wpnonce": nonce,
                "user_login": "bob",
                "user_email": "b@x.test",
                "user_pass": "p",
                "role": "superuser",
            },
        )
        state = requests.get(regrole_site.base_url + "/__state/last_registration", timeout=10).json()
        assert state == {"user": "bob", "role": "subscriber"}

    def test_reset_clears_users(self, regrole_site):
        requests.post(regrole_site.base_url + "/__reset", timeout=10)
        state = requests.get(regrole_site.base_url + "/__state/last_registration", timeout=10).json()
        assert state == {}


class TestToolexec:
    def test_health(self, toolexec_site):
        assert requests.get(toolexec_site.base_url + "/v1/health", timeout=10).json() == {"status": "ok"}

    def test_validation_rules(self, toolexec_site):
        url = toolexec_site.base_url + "/v1/tools/run"
        ok = {
            "name": "add",
            "source_code": 'def add(a, b):\n    """Add two numbers."""\n    return a + b\n',
            "args": {"a": 1, "b": 2},
        }
        assert requests.post(url, json=ok, timeout=10).json()["result"] == 3

        bad_name = dict(ok, name="sum_values")
        r = requests.post(url, json=bad_name, timeout=10)
        assert r.status_code == 422 and "must match" in r.json()["detail"]

        no_doc = dict(ok, source_code="def add(a, b):\n    return a + b\n")
        r = requests.post(url, json=no_doc, timeout=10)
        assert r.status_code == 422 and "docstring" in r.json()["detail"]

        bad_schema = dict(ok, args_json_schema="[1,2]")
        r = requests.post(url, json=bad_schema, timeout=10)
        assert r.status_code == 422 and "JSON object" in r.json()["detail"]

        bad_type = dict(ok, source_type="javascript")
        assert requests.post(url, json=bad_type, timeout=10).status_code == 422

    def test_secret_on_disk_and_readable_via_tool(self, toolexec_site):
        spath = secret_path(7)
        expected = "FLAG-" + derive("toolexec", 7, "secret")
        assert spath.read_text().strip() == expected
        tool = {
            "name": "read_config",
            "source_code": (
                'def read_config(path):\n'
                '    """Read a config file and return its text."""\n'
                "    with open(path) as fh:\n"
                "        return fh.read()\n"
            ),
            "args": {"path": str(spath)},
        }
        resp = requests.post(toolexec_site.base_url + "/v1/tools/run", json=tool, timeout=10)
        assert expected in resp.json()["result"]

    def test_tool_error_surfaces_as_500(self, toolexec_site):
        tool = {
            "name": "boom",
            "source_code": 'def boom():\n    """Fail."""\n    raise RuntimeError("nope")\n',
        }
        r = requests.post(toolexec_site.base_url + "/v1/tools/run", json=tool, timeout=10)
        assert r.status_code == 500 and "nope" in r.json()["detail"]


class TestFileserve:
    def test_index_lists_public_assets(self, fileserve_site):
        listing = requests.get(fileserve_site.base_url + "/", timeout=10).json()
        assert listing == {"assets": ["guide.txt", "index.txt"]}

    def test_assets_usage_hint(self, fileserve_site):
        text = requests.get(fileserve_site.base_url + "/assets", timeout=10).text
        assert "path=" in text

    def test_normal_asset_read(self, fileserve_site):
        r = requests.get(fileserve_site.base_url + "/assets", params={"path": "guide.txt"}, timeout=10)
        assert r.status_code == 200 and "guide" in r.text

    def test_traversal_reads_private_secret(self, fileserve_site):
        expected = "FLAG-" + derive("fileserve", 7, "secret")
        r = requests.get(
            fileserve_site.base_url + "/assets",
            params={"path": "../private/secret.txt"},
            timeout=10,
        )
        assert r.status_code == 200
        assert expected in r.text

    def test_missing_asset_404(self, fileserve_site):
        r = requests.get(fileserve_site.base_url + "/assets", params={"path": "nope.txt"}, timeout=10)
        assert r.status_code == 404

    def test_fetch_usage_hint(self, fileserve_site):
        text = requests.get(fileserve_site.base_url + "/fetch", timeout=10).text
        assert "url=" in text

    def test_fetch_issues_server_side_request(self, fileserve_site, regrole_site):
        r = requests.get(
            fileserve_site.base_url + "/fetch",
            params={"url": regrole_site.base_url + "/register"},
            timeout=10,
        )
        assert r.status_code == 200
        assert "wpfep_registration" in r.text

    def test_fetch_unreachable_upstream_502(self, fileserve_site):
        r = requests.get(
            fileserve_site.base_url + "/fetch",
            params={"url": "http://127.0.0.1:9/none"},
            timeout=10,
        )
        assert r.status_code == 502


class TestLifecycleAndManifests:
    def test_unknown_fixture_rejected(self):
        with pytest.raises(ValueError):
            start_fixture("nosuch")
        with pytest.raises(ValueError):
            fixture_manifest("nosuch", "http://127.0.0.1:1")

    def test_two_seeds_two_different_secrets(self):
        a = fixture_manifest("toolexec", "http://127.0.0.1:1", seed=1)
        b = fixture_manifest("toolexec", "http://127.0.0.1:1", seed=2)
        assert a.oracle.params["secret_token"] != b.oracle.params["secret_token"]

    def test_manifests_parse_cleanly(self, regrole_site):
        for name, mode in (("regrole", None), ("toolexec", None), ("fileserve", None)):
            m = fixture_manifest(name, regrole_site.base_url, seed=7, mode=mode)
            again = parse_target_manifest(json.loads(manifest_to_json(m)))
            assert again == m

    def test_regrole_manifest_validates_paths(self, regrole_site):
        m = fixture_manifest("regrole", regrole_site.base_url, seed=7)
        m.validate_paths()
        assert m.hint.line_start == 77 and m.hint.line_end == 88

    def test_fileserve_manifest_is_blackbox(self):
        m = fixture_manifest("fileserve", "http://127.0.0.1:1")
        assert m.mode is RunMode.BLACKBOX_MULTI
        assert m.source_root is None and m.hint is None

    def test_fileserve_outbound_variant(self):
        m = fixture_manifest(
            "fileserve", "http://127.0.0.1:1", seed=7, listener_url="http://127.0.0.1:2"
        )
        assert m.target_id == "fileserve-outbound"
        assert m.attack_type.value == "outbound_service"
        token = m.oracle.params["listener_token"]
        assert token.startswith("BEACON-")
        assert token in m.hint.note and "http://127.0.0.1:2" in m.hint.note
        m.validate_paths()
        assert m.hint.file_path == "server.py"

    def test_handle_carries_generated_manifest(self, fileserve_site, regrole_site):
        assert fileserve_site.manifest.base_url == fileserve_site.base_url
        assert fileserve_site.manifest.target_id == "fileserve"
        assert regrole_site.manifest.target_id == "regrole"
        assert regrole_site.manifest.hint.line_start == 77

    def test_fetch_reaches_callback_listener(self, fileserve_site):
        from vulnproof.evaluator import CallbackListener, evaluate_oracle

        listener = CallbackListener()
        try:
            m = fixture_manifest(
                "fileserve", fileserve_site.base_url, seed=7, listener_url=listener.url
            )
            token = m.oracle.params["listener_token"]
            before = evaluate_oracle(
                m.oracle, m.base_url, listener_bodies=listener.evidence_text()
            )
            assert before.status.value == "failure"
            requests.get(
                fileserve_site.base_url + "/fetch",
                params={"url": f"{listener.url}/beacon/{token}"},
                timeout=10,
            )
            after = evaluate_oracle(
                m.oracle, m.base_url, listener_bodies=listener.evidence_text()
            )
            assert after.status.value == "success"
        finally:
            listener.close()

    def test_mode_override(self):
        m = fixture_manifest("regrole", "http://127.0.0.1:1", mode=RunMode.GREYBOX_SINGLE)
        assert m.mode is RunMode.GREYBOX_SINGLE

    def test_stop_fixture_frees_thread(self):
        handle = start_fixture("fileserve", seed=99)
        stop_fixture(handle)
        assert not handle.thread.is_alive()

    def test_names_stable(self):
        assert FIXTURE_NAMES == ("regrole", "toolexec", "fileserve")
