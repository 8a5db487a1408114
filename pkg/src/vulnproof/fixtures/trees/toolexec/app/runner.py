"""Executes a validated tool in-process.

The function named by the tool is looked up in the exec namespace and
called with the submitted args. env_vars are exported for the duration
of the call.
"""

import os


def execute_tool(name, source_code, args, env_vars):
    namespace = {}
    exec(source_code, namespace)  # user-supplied code runs with service privileges
    func = namespace[name]
    saved = {}
    for key, value in env_vars.items():
        saved[key] = os.environ.get(key)
        os.environ[key] = str(value)
    try:
        return func(**args)
    finally:
        for key, value in saved.items():
            if value is None:
                os.environ.pop(key, None)
            else:
                os.environ[key] = value
