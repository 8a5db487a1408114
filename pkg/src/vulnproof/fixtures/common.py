"""Shared fixture plumbing."""

from fastapi import HTTPException, Request

LOOPBACK = ("127.0.0.1", "::1", "testclient")


def require_loopback(request: Request) -> None:
    """Management endpoints (__reset, __state) answer loopback callers only."""
    client = request.client.host if request.client else ""
    if client not in LOOPBACK:
        raise HTTPException(status_code=403, detail="loopback only")
