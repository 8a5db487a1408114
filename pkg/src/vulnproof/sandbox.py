"""Confined execution environment for exploit attempts.

Every side effect an agent can cause goes through one of three channels,
each of which records into the run's execution trace:

  http_request  raw "METHOD /path" requests resolved against the target,
                restricted to an explicit authority allowlist, redirects
                never followed, no cookie jar
  run_command   shell commands checked token-by-token so only allowlisted
                programs appear in command position; the default allowlist
                contains no network-capable programs
  write_file    writes confined to a per-run scratch directory

Denied operations raise SandboxViolation before any side effect happens.
Every attempted HTTP authority is appended to CONNECTION_AUDIT so a test
suite can assert that no forbidden connection was ever made.
"""

from __future__ import annotations

import os
import re
import shlex
import shutil
import stat
import subprocess
import tempfile
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional
from urllib.parse import urlsplit

import requests

from .domain import ExecutionTrace, TargetManifest

# Text and filesystem inspection only; nothing here can open a socket.
DEFAULT_TOOL_ALLOWLIST = frozenset(
    {
        "ls", "cat", "grep", "egrep", "fgrep", "head", "tail", "wc", "find",
        "sort", "uniq", "cut", "tr", "sed", "awk", "echo", "printf", "base64",
        "stat", "file", "pwd", "id", "date", "true", "false", "md5sum",
        "sha256sum", "diff", "strings", "env", "basename", "dirname", "test",
    }
)

_SHELL_OPERATORS = {";", "|", "&&", "||", "&", "|&", ";;"}
_REDIRECTS = {">", ">>", "<", "<<", "2>", "2>>", "&>", ">&", "<<<"}
_ENV_ASSIGN = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*=")

# (authority, allowed) for every HTTP attempt in this process, in order.
CONNECTION_AUDIT: list[tuple[str, bool]] = []

# Response headers forwarded to agents and traces; everything else is
# volatile (Date, Server, Connection) and would break determinism.
_KEPT_HEADERS = ("content-type", "location", "set-cookie", "www-authenticate", "retry-after")


class SandboxViolation(PermissionError):
    pass


def authority_of(url: str) -> str:
    """host:port with the scheme default applied."""
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.hostname:
        raise SandboxViolation(f"not an http(s) URL: {url!r}")
    port = parts.port or (443 if parts.scheme == "https" else 80)
    return f"{parts.hostname}:{port}"


def check_command(command: str, allowlist: frozenset[str]) -> list[str]:
    """Validate a shell command; returns the programs in command position.

    Fails closed: command substitution, unparseable quoting and unknown
    programs are all violations.
    """
    if "`" in command or "$(" in command:
        raise SandboxViolation("command substitution is not allowed")
    if "\n" in command:
        raise SandboxViolation("multi-line commands are not allowed")
    lexer = shlex.shlex(command, posix=True, punctuation_chars=True)
    lexer.whitespace_split = True
    try:
        tokens = list(lexer)
    except ValueError as e:
        raise SandboxViolation(f"cannot parse command: {e}") from e
    if not tokens:
        raise SandboxViolation("empty command")

    programs: list[str] = []
    expect_command = True
    skip_filename = False
    for tok in tokens:
        if tok in _SHELL_OPERATORS:
            expect_command = True
            continue
        if tok in ("(", ")"):
            continue
        if tok in _REDIRECTS:
            skip_filename = True
            continue
        if skip_filename:
            skip_filename = False
            continue
        if expect_command:
            if _ENV_ASSIGN.match(tok):
                continue
            program = Path(tok).name
            if program not in allowlist:
                raise SandboxViolation(f"program not allowlisted: {program!r}")
            programs.append(program)
            expect_command = False
    if not programs:
        raise SandboxViolation("no program in command position")
    return programs


@dataclass
class SandboxPolicy:
    allowed_authorities: frozenset[str]
    scratch_dir: Path
    tool_allowlist: frozenset[str] = DEFAULT_TOOL_ALLOWLIST
    command_timeout: float = 20.0
    http_timeout: float = 15.0
    max_output_chars: int = 60_000

    @classmethod
    def for_target(
        cls,
        base_url: str,
        scratch_dir: Path,
        listener_url: str = "",
        extra_tools: frozenset[str] = frozenset(),
    ) -> "SandboxPolicy":
        authorities = {authority_of(base_url)}
        if listener_url:
            authorities.add(authority_of(listener_url))
        return cls(
            allowed_authorities=frozenset(authorities),
            scratch_dir=Path(scratch_dir),
            tool_allowlist=DEFAULT_TOOL_ALLOWLIST | extra_tools,
        )


@dataclass
class HttpResult:
    status: int
    reason: str
    headers: tuple[tuple[str, str], ...]
    body: str
    elapsed: float = 0.0

    def render(self) -> str:
        lines = [f"HTTP/1.1 {self.status} {self.reason}"]
        lines.extend(f"{k}: {v}" for k, v in self.headers)
        return "\n".join(lines) + "\n\n" + self.body


@dataclass
class CommandResult:
    exit_code: int
    stdout: str
    stderr: str


_REQUEST_LINE = re.compile(r"^([A-Z]+)\s+(\S+)(?:\s+HTTP/[\d.]+)?$")


def parse_raw_request(raw: str) -> tuple[str, str, dict[str, str], str]:
    """Split 'METHOD target[\\nheaders][\\n\\nbody]' into parts."""
    head, sep, body = raw.partition("\n\n")
    lines = head.splitlines()
    if not lines:
        raise SandboxViolation("empty HTTP request")
    m = _REQUEST_LINE.match(lines[0].strip())
    if not m:
        raise SandboxViolation(f"bad request line: {lines[0]!r}")
    method, target = m.group(1), m.group(2)
    headers: dict[str, str] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        if ":" not in line:
            raise SandboxViolation(f"bad header line: {line!r}")
        name, value = line.split(":", 1)
        headers[name.strip()] = value.strip()
    return method, target, headers, body if sep else ""


class Sandbox:
    """One confined environment bound to one run's trace."""

    def __init__(self, policy: SandboxPolicy):
        self.policy = policy
        self.policy.scratch_dir.mkdir(parents=True, exist_ok=True)

    # -- HTTP -----------------------------------------------------------

    def resolve_url(self, target: str, base_url: str) -> str:
        if target.startswith(("http://", "https://")):
            return target
        if not target.startswith("/"):
            target = "/" + target
        return base_url.rstrip("/") + target

    def http_request(
        self,
        raw: str,
        base_url: str,
        trace: Optional[ExecutionTrace] = None,
    ) -> HttpResult:
        method, target, headers, body = parse_raw_request(raw)
        url = self.resolve_url(target, base_url)
        authority = authority_of(url)
        allowed = authority in self.policy.allowed_authorities
        CONNECTION_AUDIT.append((authority, allowed))
        if not allowed:
            raise SandboxViolation(
                f"connection to {authority} is outside the allowlist "
                f"{sorted(self.policy.allowed_authorities)}"
            )
        started = time.monotonic()
        try:
            # fresh session per request: no cookie carryover, no env proxies
            with requests.Session() as session:
                session.trust_env = False
                resp = session.request(
                    method,
                    url,
                    headers=headers or None,
                    data=body.encode("utf-8") if body else None,
                    allow_redirects=False,
                    timeout=self.policy.http_timeout,
                )
        except requests.RequestException as e:
            result = HttpResult(
                0, f"connection-error: {e.__class__.__name__}", (), str(e),
                elapsed=time.monotonic() - started,
            )
            if trace is not None:
                trace.add_http(self._render_request(method, url, headers, body), result.render())
            return result
        kept = tuple(
            (k, resp.headers[k])
            for k in _KEPT_HEADERS
            if k in {h.lower() for h in resp.headers}
        )
        text = resp.text
        if len(text) > self.policy.max_output_chars:
            text = text[: self.policy.max_output_chars] + "\n[truncated]"
        result = HttpResult(
            resp.status_code, resp.reason or "", kept, text,
            elapsed=time.monotonic() - started,
        )
        if trace is not None:
            trace.add_http(self._render_request(method, url, headers, body), result.render())
        return result

    @staticmethod
    def _render_request(method: str, url: str, headers: dict[str, str], body: str) -> str:
        # Path-only rendering keeps traces and prompts identical across
        # whatever port the fixture happened to bind.
        parts = urlsplit(url)
        target = parts.path or "/"
        if parts.query:
            target += "?" + parts.query
        lines = [f"{method} {target}"]
        lines.extend(f"{k}: {v}" for k, v in sorted(headers.items()))
        rendered = "\n".join(lines)
        if body:
            rendered += "\n\n" + body
        return rendered

    # -- shell ------------------------------------------------------------

    def run_command(self, command: str, trace: Optional[ExecutionTrace] = None) -> CommandResult:
        check_command(command, self.policy.tool_allowlist)
        try:
            proc = subprocess.run(
                command,
                shell=True,
                cwd=self.policy.scratch_dir,
                capture_output=True,
                text=True,
                timeout=self.policy.command_timeout,
                env={"PATH": "/usr/bin:/bin", "HOME": str(self.policy.scratch_dir)},
            )
            exit_code, stdout, stderr = proc.returncode, proc.stdout, proc.stderr
        except subprocess.TimeoutExpired:
            exit_code, stdout, stderr = 124, "", "timed out"
        stdout = stdout[: self.policy.max_output_chars]
        stderr = stderr[: self.policy.max_output_chars]
        if trace is not None:
            trace.add_command(command, exit_code, stdout, stderr)
        return CommandResult(exit_code, stdout, stderr)

    # -- files ------------------------------------------------------------

    def write_file(self, rel_path: str, content: str, trace: Optional[ExecutionTrace] = None) -> Path:
        scratch = self.policy.scratch_dir.resolve()
        candidate = Path(rel_path)
        if candidate.is_absolute():
            resolved = candidate.resolve()
        else:
            resolved = (scratch / candidate).resolve()
        if scratch != resolved and scratch not in resolved.parents:
            raise SandboxViolation(f"write outside scratch dir: {rel_path!r}")
        resolved.parent.mkdir(parents=True, exist_ok=True)
        resolved.write_text(content, encoding="utf-8")
        if trace is not None:
            trace.add_note(f"wrote file {resolved.relative_to(scratch)} ({len(content)} chars)")
        return resolved


class EnvironmentDestroyed(SandboxViolation):
    pass


SOURCE_SUBDIR = "source"


class ExecutionEnvironment:
    """Per-run attacker workspace.

    Holds a fresh scratch directory (with a read-only copy of the target
    source in grey-box mode), the network allowlist, and the run's
    execution trace. All agent side effects flow through here.
    """

    def __init__(self, manifest: TargetManifest, policy: SandboxPolicy, workdir: Path):
        self.env_id = f"env-{uuid.uuid4().hex[:12]}"
        self.manifest = manifest
        self.workdir = workdir
        self._sandbox = Sandbox(policy)
        self.trace = ExecutionTrace(self.env_id)
        self.alive = True
        # counts every command and HTTP exchange for trace-completeness checks
        self.interactions = 0

    @property
    def policy(self) -> SandboxPolicy:
        return self._sandbox.policy

    @property
    def source_dir(self) -> Optional[Path]:
        candidate = self.workdir / SOURCE_SUBDIR
        return candidate if candidate.is_dir() else None

    def _require_alive(self) -> None:
        if not self.alive:
            raise EnvironmentDestroyed(f"{self.env_id} has been destroyed")

    def begin_attempt(self, run_id: str) -> ExecutionTrace:
        """Fresh trace for the next attempt; the old one stays with the caller."""
        self._require_alive()
        self.trace = ExecutionTrace(run_id)
        return self.trace

    def exec_command(self, command: str) -> CommandResult:
        self._require_alive()
        result = self._sandbox.run_command(command, self.trace)
        self.interactions += 1
        return result

    def http_request(
        self,
        method: str,
        url: str,
        headers: Optional[dict[str, str]] = None,
        body: str = "",
    ) -> HttpResult:
        self._require_alive()
        raw = f"{method} {url}"
        for k, v in (headers or {}).items():
            raw += f"\n{k}: {v}"
        if body:
            raw += "\n\n" + body
        result = self._sandbox.http_request(raw, self.manifest.base_url, self.trace)
        self.interactions += 1
        return result

    def send_raw(self, raw: str) -> HttpResult:
        """Raw 'METHOD /path' request text, as produced by agents."""
        self._require_alive()
        result = self._sandbox.http_request(raw, self.manifest.base_url, self.trace)
        self.interactions += 1
        return result

    def write_file(self, rel_path: str, content: str) -> Path:
        self._require_alive()
        resolved = (self.workdir / rel_path) if not Path(rel_path).is_absolute() else Path(rel_path)
        try:
            resolved.resolve().relative_to((self.workdir / SOURCE_SUBDIR).resolve())
        except ValueError:
            pass
        else:
            raise SandboxViolation("the source copy is read-only")
        return self._sandbox.write_file(rel_path, content, self.trace)

    def destroy(self) -> None:
        self.alive = False
        shutil.rmtree(self.workdir, ignore_errors=True)


def create_env(
    manifest: TargetManifest,
    listener_url: str = "",
    workdir_root: Optional[Path] = None,
    extra_tools: frozenset[str] = frozenset(),
) -> ExecutionEnvironment:
    """Fresh environment for one run against one target.

    Grey-box manifests get a read-only copy of the source tree under
    <workdir>/source; black-box environments start empty.
    """
    workdir = Path(
        tempfile.mkdtemp(prefix="vulnproof-env-", dir=str(workdir_root) if workdir_root else None)
    )
    if manifest.greybox and manifest.source_root:
        src = Path(manifest.source_root)
        if not src.is_dir():
            raise SandboxViolation(f"source_root not found: {manifest.source_root}")
        dest = workdir / SOURCE_SUBDIR
        shutil.copytree(src, dest)
        for path in dest.rglob("*"):
            if path.is_file():
                path.chmod(stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)
    policy = SandboxPolicy.for_target(
        manifest.base_url, workdir, listener_url=listener_url, extra_tools=extra_tools
    )
    return ExecutionEnvironment(manifest, policy, workdir)
