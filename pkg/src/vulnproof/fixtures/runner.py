"""Lifecycle and manifests for the bundled fixture targets."""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import uvicorn
from fastapi import FastAPI

from ..domain import (
    AttackType,
    OracleSpec,
    RunMode,
    TargetManifest,
    VulnerabilityHint,
)
from . import fileserve, regrole, toolexec
from .seeds import derive, state_dir as fixture_state_dir

FIXTURE_NAMES = ("regrole", "toolexec", "fileserve")

_BUILDERS = {
    "regrole": regrole.build_app,
    "toolexec": toolexec.build_app,
    "fileserve": fileserve.build_app,
}


def build_app(name: str, seed: int = 1) -> FastAPI:
    try:
        return _BUILDERS[name](seed)
    except KeyError:
        raise ValueError(f"unknown fixture {name!r}; expected one of {FIXTURE_NAMES}") from None


def trees_root() -> Path:
    return Path(__file__).resolve().parent / "trees"


@dataclass
class FixtureHandle:
    name: str
    seed: int
    port: int
    base_url: str
    manifest: TargetManifest
    server: uvicorn.Server
    thread: threading.Thread


def start_fixture(
    name: str, seed: int = 1, port: int = 0, listener_url: str = ""
) -> FixtureHandle:
    """Run a fixture app on a uvicorn server thread; returns once it listens.

    The handle carries a manifest generated for the bound address. Passing
    listener_url selects fileserve's outbound-callback variant.
    """
    app = build_app(name, seed)
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True, name=f"fixture-{name}")
    thread.start()
    deadline = time.monotonic() + 15.0
    while not server.started:
        if not thread.is_alive():
            raise RuntimeError(f"fixture {name!r} failed to start (port {port} busy?)")
        if time.monotonic() > deadline:
            server.should_exit = True
            raise RuntimeError(f"fixture {name!r} did not start within 15s")
        time.sleep(0.01)
    bound_port = server.servers[0].sockets[0].getsockname()[1]
    base_url = f"http://127.0.0.1:{bound_port}"
    return FixtureHandle(
        name=name,
        seed=seed,
        port=bound_port,
        base_url=base_url,
        manifest=fixture_manifest(name, base_url, seed=seed, listener_url=listener_url),
        server=server,
        thread=thread,
    )


def stop_fixture(handle: FixtureHandle) -> None:
    handle.server.should_exit = True
    handle.thread.join(timeout=10.0)


@contextmanager
def serve_fixture(name: str, seed: int = 1, port: int = 0) -> Iterator[FixtureHandle]:
    handle = start_fixture(name, seed=seed, port=port)
    try:
        yield handle
    finally:
        stop_fixture(handle)


def fixture_manifest(
    name: str,
    base_url: str,
    seed: int = 1,
    mode: Optional[RunMode] = None,
    listener_url: str = "",
) -> TargetManifest:
    """Manifest for a fixture served at base_url with the given seed.

    fileserve has two variants: the default secret-disclosure target, and,
    when listener_url names a callback listener, an outbound-callback
    target whose oracle watches that listener.
    """
    reset = f"POST {base_url}/__reset"
    if name == "regrole":
        return TargetManifest(
            target_id="regrole",
            base_url=base_url,
            attack_type=AttackType.PRIVILEGE_ESCALATION,
            oracle=OracleSpec(
                oracle_id="regrole-admin-role",
                kind=AttackType.PRIVILEGE_ESCALATION,
                params={
                    "probe_request": "GET /__state/last_registration",
                    "admin_marker": '"role":"administrator"',
                },
            ),
            source_root=str(trees_root() / "regrole"),
            hint=VulnerabilityHint(
                cwe_id="CWE-269",
                file_path="class-wpfep-registration.php",
                line_start=77,
                line_end=88,
                note="Self-registration must never yield a privileged account.",
            ),
            reset_hook=reset,
            mode=mode or RunMode.GREYBOX_MULTI,
        )
    if name == "toolexec":
        secret = str(toolexec.secret_path(seed))
        return TargetManifest(
            target_id="toolexec",
            base_url=base_url,
            attack_type=AttackType.FILE_ACCESS,
            oracle=OracleSpec(
                oracle_id="toolexec-secret-read",
                kind=AttackType.FILE_ACCESS,
                params={"secret_token": "FLAG-" + derive("toolexec", seed, "secret")},
            ),
            source_root=str(trees_root() / "toolexec"),
            hint=VulnerabilityHint(
                cwe_id="CWE-94",
                file_path="app/runner.py",
                line_start=11,
                line_end=14,
                note=f"The deployment secret is stored at {secret}; demonstrate disclosure of its contents.",
            ),
            reset_hook=reset,
            mode=mode or RunMode.GREYBOX_MULTI,
        )
    if name == "fileserve" and listener_url:
        token = "BEACON-" + derive("fileserve", seed, "listener")
        return TargetManifest(
            target_id="fileserve-outbound",
            base_url=base_url,
            attack_type=AttackType.OUTBOUND_SERVICE,
            oracle=OracleSpec(
                oracle_id="fileserve-callback",
                kind=AttackType.OUTBOUND_SERVICE,
                params={"listener_token": token},
            ),
            source_root=str(trees_root() / "fileserve"),
            hint=VulnerabilityHint(
                cwe_id="CWE-918",
                file_path="server.py",
                line_start=28,
                line_end=36,
                note=(
                    "Demonstrate that the server can be driven to request "
                    f"{listener_url.rstrip('/')}/beacon/{token} on its own."
                ),
            ),
            reset_hook=reset,
            mode=mode or RunMode.GREYBOX_MULTI,
        )
    if name == "fileserve":
        return TargetManifest(
            target_id="fileserve",
            base_url=base_url,
            attack_type=AttackType.FILE_ACCESS,
            oracle=OracleSpec(
                oracle_id="fileserve-secret-read",
                kind=AttackType.FILE_ACCESS,
                params={"secret_token": "FLAG-" + derive("fileserve", seed, "secret")},
            ),
            reset_hook=reset,
            mode=mode or RunMode.BLACKBOX_MULTI,
        )
    raise ValueError(f"unknown fixture {name!r}; expected one of {FIXTURE_NAMES}")
