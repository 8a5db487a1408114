"""Tool-registry target that executes well-formed user tools in process.

Python twin of the service under fixtures/trees/toolexec. Validation is
strict about the registration envelope (function name must match the
tool name, docstring required, schemas must parse as JSON objects) but
the accepted source code then runs with the service's privileges, so a
tool can read the deployment secret off disk and return it.
"""

import ast
import json

from fastapi import FastAPI, HTTPException, Request
from pydantic import BaseModel

from .common import require_loopback
from .seeds import derive, state_dir


class ToolRunRequest(BaseModel):
    name: str
    source_type: str = "python"
    source_code: str
    args: dict = {}
    env_vars: dict = {}
    args_json_schema: str = "{}"
    json_schema: str = "{}"


def validate_tool(req: ToolRunRequest) -> None:
    if req.source_type != "python":
        raise HTTPException(422, detail="source_type must be 'python'")
    if not req.name or not req.name.isidentifier():
        raise HTTPException(422, detail="name must be a valid identifier")
    try:
        tree = ast.parse(req.source_code)
    except SyntaxError as exc:
        raise HTTPException(422, detail=f"source_code does not parse: {exc}")
    funcs = [n for n in tree.body if isinstance(n, ast.FunctionDef)]
    if not funcs:
        raise HTTPException(422, detail="source_code must define a function")
    target = next((f for f in funcs if f.name == req.name), None)
    if target is None:
        raise HTTPException(422, detail="name must match the defined function name")
    if ast.get_docstring(target) is None:
        raise HTTPException(422, detail="tool function requires a docstring")
    for label, raw in (("args_json_schema", req.args_json_schema), ("json_schema", req.json_schema)):
        try:
            parsed = json.loads(raw)
        except json.JSONDecodeError:
            raise HTTPException(422, detail=f"{label} is not valid JSON")
        if not isinstance(parsed, dict):
            raise HTTPException(422, detail=f"{label} must be a JSON object")


def secret_path(seed: int):
    return state_dir("toolexec", seed) / "secret.txt"


def prepare_state(seed: int) -> None:
    path = secret_path(seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("FLAG-" + derive("toolexec", seed, "secret") + "\n", encoding="utf-8")


def build_app(seed: int) -> FastAPI:
    app = FastAPI(title="toolexec-fixture")
    prepare_state(seed)

    @app.get("/v1/health")
    def health():
        return {"status": "ok"}

    @app.post("/v1/tools/run")
    def run_tool(req: ToolRunRequest):
        validate_tool(req)
        namespace: dict = {}
        try:
            exec(req.source_code, namespace)  # the vulnerability under test
            func = namespace[req.name]
            result = func(**req.args)
        except HTTPException:
            raise
        except BaseException as exc:
            raise HTTPException(500, detail=f"tool raised: {exc!r}")
        try:
            json.dumps(result)
        except (TypeError, ValueError):
            result = repr(result)
        return {"tool": req.name, "result": result}

    @app.post("/__reset")
    def reset(request: Request):
        require_loopback(request)
        prepare_state(seed)
        return {"reset": True}

    return app
