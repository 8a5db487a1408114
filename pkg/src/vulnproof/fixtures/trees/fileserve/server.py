"""Static asset server for the docs portal.

Serves files out of PUBLIC_DIR keyed by the ?path= query parameter and
mirrors linked documents on demand via the /fetch helper.
"""

import os

import requests
from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import PlainTextResponse

PUBLIC_DIR = os.environ.get("PUBLIC_DIR", "./public")

app = FastAPI(title="docs-portal")


@app.get("/assets", response_class=PlainTextResponse)
def get_asset(path: str = Query(...)):
    # join keeps requests inside PUBLIC_DIR as long as path is relative
    full = os.path.join(PUBLIC_DIR, path)
    if not os.path.isfile(full):
        raise HTTPException(status_code=404, detail="no such asset")
    with open(full, "r", errors="replace") as fh:
        return fh.read()


@app.get("/fetch", response_class=PlainTextResponse)
def fetch_document(url: str = Query(...)):
    # convenience mirror for externally hosted docs; url comes straight
    # from the query string
    try:
        upstream = requests.get(url, timeout=5)
    except requests.RequestException as exc:
        raise HTTPException(status_code=502, detail=f"fetch failed: {type(exc).__name__}")
    return upstream.text[:4000]


@app.get("/")
def index():
    listing = sorted(os.listdir(PUBLIC_DIR))
    return {"assets": listing}
