"""Surface discovery for targets without source access.

A wordlist of candidate paths is probed concurrently against the target;
responses with interesting status codes become the endpoint inventory
fed into the agent's working context. Results are cached on disk so
repeated runs against the same deployment do not re-hammer it.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path
from typing import Iterable, Optional

import requests

from .sandbox import authority_of

DEFAULT_INCLUDE_STATUSES = frozenset({200, 204, 301, 302, 401, 403})
CACHE_TTL_SECONDS = 3600.0


class ReconError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProbeHit:
    path: str
    status: int
    content_length: int

    def to_dict(self) -> dict:
        return {"path": self.path, "status": self.status, "content_length": self.content_length}


@dataclass(frozen=True)
class ReconReport:
    probed: int
    hits: tuple[ProbeHit, ...]

    def to_dict(self) -> dict:
        return {"probed": self.probed, "hits": [h.to_dict() for h in self.hits]}

    @classmethod
    def from_dict(cls, d: dict) -> "ReconReport":
        return cls(
            probed=int(d["probed"]),
            hits=tuple(ProbeHit(h["path"], int(h["status"]), int(h["content_length"])) for h in d["hits"]),
        )


def load_wordlist(path: Path | str) -> list[str]:
    """Candidate paths, one per line; '#' comments and blanks skipped."""
    out: list[str] = []
    seen: set[str] = set()
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line not in seen:
            seen.add(line)
            out.append(line)
    if not out:
        raise ReconError(f"wordlist is empty: {path}")
    return out


def join_url(base_url: str, candidate: str) -> str:
    # deliberate string join: urljoin would let '//host' candidates jump
    # to a different authority
    return base_url.rstrip("/") + "/" + candidate.lstrip("/")


def is_live(base_url: str, timeout: float = 5.0) -> bool:
    """Any HTTP response at all counts as alive."""
    try:
        requests.get(base_url, timeout=timeout, allow_redirects=False)
        return True
    except requests.RequestException:
        return False


def _probe_one(session: requests.Session, base_url: str, path: str, timeout: float) -> Optional[ProbeHit]:
    try:
        resp = session.get(join_url(base_url, path), timeout=timeout, allow_redirects=False)
    except requests.RequestException:
        return None
    return ProbeHit(path="/" + path.lstrip("/"), status=resp.status_code, content_length=len(resp.content))


def probe_paths(
    base_url: str,
    paths: Iterable[str],
    include_statuses: frozenset[int] = DEFAULT_INCLUDE_STATUSES,
    max_workers: int = 8,
    timeout: float = 5.0,
) -> ReconReport:
    authority_of(base_url)  # reject non-http targets up front
    candidates = list(paths)
    hits: list[ProbeHit] = []
    with requests.Session() as session:
        session.trust_env = False
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {
                pool.submit(_probe_one, session, base_url, p, timeout): p for p in candidates
            }
            for fut in as_completed(futures):
                hit = fut.result()
                if hit is not None and hit.status in include_statuses:
                    hits.append(hit)
    hits.sort(key=lambda h: h.path)
    return ReconReport(probed=len(candidates), hits=tuple(hits))


def _cache_key(base_url: str, paths: list[str], include_statuses: frozenset[int]) -> str:
    material = json.dumps(
        {"base": base_url, "paths": paths, "statuses": sorted(include_statuses)},
        sort_keys=True,
    )
    return sha256(material.encode("utf-8")).hexdigest()[:24]


def discover_endpoints(
    base_url: str,
    wordlist_path: Path | str,
    cache_dir: Optional[Path] = None,
    include_statuses: frozenset[int] = DEFAULT_INCLUDE_STATUSES,
    max_workers: int = 8,
    timeout: float = 5.0,
    ttl: float = CACHE_TTL_SECONDS,
) -> ReconReport:
    """Probe the wordlist against the target, with a TTL'd on-disk cache."""
    if not is_live(base_url, timeout=timeout):
        raise ReconError(f"target not reachable: {base_url}")
    paths = load_wordlist(wordlist_path)

    cache_file = None
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        cache_file = cache_dir / f"recon-{_cache_key(base_url, paths, include_statuses)}.json"
        if cache_file.exists():
            try:
                cached = json.loads(cache_file.read_text(encoding="utf-8"))
                if time.time() - float(cached["saved_at"]) < ttl:
                    return ReconReport.from_dict(cached["report"])
            except (KeyError, ValueError, json.JSONDecodeError):
                pass  # unreadable cache is treated as absent

    report = probe_paths(base_url, paths, include_statuses, max_workers, timeout)

    if cache_file is not None:
        payload = json.dumps({"saved_at": time.time(), "report": report.to_dict()}, indent=2)
        fd, tmp_name = tempfile.mkstemp(dir=str(cache_dir), suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload)
            os.replace(tmp_name, cache_file)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
    return report


def render_inventory(report: ReconReport) -> str:
    """Port-free text block for prompts and the working context."""
    if not report.hits:
        return f"Endpoint sweep: probed {report.probed} paths, nothing responded with an interesting status."
    lines = [f"Endpoint sweep: probed {report.probed} paths, {len(report.hits)} responded:"]
    for hit in report.hits:
        lines.append(f"  {hit.status}  {hit.path}  ({hit.content_length} bytes)")
    return "\n".join(lines)
