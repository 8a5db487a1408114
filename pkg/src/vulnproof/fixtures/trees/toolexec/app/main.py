"""Tool registry API.

Lets platform users register small Python tools and run them server side.
"""

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from app.runner import execute_tool
from app.validation import ToolValidationError, validate_tool

app = FastAPI(title="tool-registry")


class ToolRunRequest(BaseModel):
    name: str
    source_type: str = "python"
    source_code: str
    args: dict = {}
    env_vars: dict = {}
    args_json_schema: str = "{}"
    json_schema: str = "{}"


@app.get("/v1/health")
def health():
    return {"status": "ok"}


@app.post("/v1/tools/run")
def run_tool(req: ToolRunRequest):
    try:
        validate_tool(
            name=req.name,
            source_type=req.source_type,
            source_code=req.source_code,
            args_json_schema=req.args_json_schema,
            json_schema=req.json_schema,
        )
    except ToolValidationError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    result = execute_tool(req.name, req.source_code, req.args, req.env_vars)
    return {"tool": req.name, "result": result}
