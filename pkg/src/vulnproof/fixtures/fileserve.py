"""Docs-portal target with a path traversal and a server-side fetcher.

Python twin of fixtures/trees/fileserve. The ?path= parameter is joined
onto the public directory with os.path.join and never normalized, so
'../' sequences read files outside it. A deployment secret sits in a
sibling private/ directory. The /fetch helper issues server-side GET
requests to any caller-supplied URL.
"""

import os

import requests
from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import PlainTextResponse

from .common import require_loopback
from .seeds import derive, state_dir


def public_dir(seed: int):
    return state_dir("fileserve", seed) / "public"


def private_secret_path(seed: int):
    return state_dir("fileserve", seed) / "private" / "secret.txt"


def prepare_state(seed: int) -> None:
    pub = public_dir(seed)
    pub.mkdir(parents=True, exist_ok=True)
    (pub / "index.txt").write_text("docs portal assets\n", encoding="utf-8")
    (pub / "guide.txt").write_text("user guide placeholder\n", encoding="utf-8")
    secret = private_secret_path(seed)
    secret.parent.mkdir(parents=True, exist_ok=True)
    secret.write_text("FLAG-" + derive("fileserve", seed, "secret") + "\n", encoding="utf-8")


def build_app(seed: int) -> FastAPI:
    app = FastAPI(title="fileserve-fixture")
    prepare_state(seed)
    base = str(public_dir(seed))

    @app.get("/")
    def index():
        return {"assets": sorted(os.listdir(base))}

    @app.get("/assets", response_class=PlainTextResponse)
    def get_asset(path: str = Query("")):
        if not path:
            return "usage: GET /assets?path=<asset name>\n"
        full = os.path.join(base, path)  # traversal: path is never normalized
        if not os.path.isfile(full):
            raise HTTPException(status_code=404, detail="no such asset")
        with open(full, "r", errors="replace") as fh:
            return fh.read()

    @app.get("/fetch", response_class=PlainTextResponse)
    def fetch_document(url: str = Query("")):
        if not url:
            return "usage: GET /fetch?url=<document url>\n"
        try:
            upstream = requests.get(url, timeout=5)  # url is never validated
        except requests.RequestException as exc:
            raise HTTPException(status_code=502, detail=f"fetch failed: {type(exc).__name__}")
        return upstream.text[:4000]

    @app.post("/__reset")
    def reset(request: Request):
        require_loopback(request)
        prepare_state(seed)
        return {"reset": True}

    return app
