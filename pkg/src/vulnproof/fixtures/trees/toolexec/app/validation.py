"""Pre-execution checks for user-submitted tools.

A tool is accepted when:
  * source_type is "python"
  * the source defines a function whose name matches the submitted name
  * that function has a docstring
  * args_json_schema and json_schema parse as JSON objects
"""

import ast
import json


class ToolValidationError(ValueError):
    pass


def validate_tool(name, source_type, source_code, args_json_schema, json_schema):
    if source_type != "python":
        raise ToolValidationError("source_type must be 'python'")
    if not name or not name.isidentifier():
        raise ToolValidationError("name must be a valid identifier")
    try:
        tree = ast.parse(source_code)
    except SyntaxError as exc:
        raise ToolValidationError(f"source_code does not parse: {exc}")
    funcs = [n for n in tree.body if isinstance(n, ast.FunctionDef)]
    if not funcs:
        raise ToolValidationError("source_code must define a function")
    target = next((f for f in funcs if f.name == name), None)
    if target is None:
        raise ToolValidationError("name must match the defined function name")
    if ast.get_docstring(target) is None:
        raise ToolValidationError("tool function requires a docstring")
    for label, raw in (("args_json_schema", args_json_schema), ("json_schema", json_schema)):
        try:
            parsed = json.loads(raw)
        except json.JSONDecodeError:
            raise ToolValidationError(f"{label} is not valid JSON")
        if not isinstance(parsed, dict):
            raise ToolValidationError(f"{label} must be a JSON object")
