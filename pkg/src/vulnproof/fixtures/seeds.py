"""Deterministic per-fixture secret material."""

import hashlib
import hmac
from pathlib import Path

_KEY = b"vulnproof-fixture-material"

STATE_ROOT = Path("/tmp/vulnproof-fixtures")


def derive(name: str, seed: int, label: str, length: int = 24) -> str:
    mac = hmac.new(_KEY, f"{name}:{seed}:{label}".encode("utf-8"), hashlib.sha256)
    return mac.hexdigest()[:length]


def state_dir(name: str, seed: int) -> Path:
    # pinned location: manifests and prompts can reference paths here
    # without depending on the port or the process
    return STATE_ROOT / f"{name}-{seed}"
