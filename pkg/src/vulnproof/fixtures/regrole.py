"""Registration target with client-controlled role assignment.

Python twin of the PHP plugin under fixtures/trees/regrole: a public
registration form protected by a nonce and a hidden marker field. The
role posted with the form is applied verbatim as long as it names an
existing role, so a crafted request registers an administrator.

A naive POST without the marker is silently ignored and a POST with a
bad nonce produces a generic failure notice, mirroring how the original
flow fails without an explicit rejection.
"""

import re
import threading

from fastapi import FastAPI, Request
from fastapi.responses import HTMLResponse, JSONResponse

from .common import require_loopback
from .seeds import derive

ROLES = ("subscriber", "contributor", "author", "editor", "administrator")

_USERNAME_OK = re.compile(r"[^a-z0-9_.-]+")

PAGE = """<!DOCTYPE html>
<html>
<head><title>Community Portal</title></head>
<body>
<h1>Join the community</h1>
{flashes}
<form method="post" action="register">
  <input type="hidden" name="wpfep_registration" value="1" />
  <input type="hidden" name="_wpnonce" value="{nonce}" />
  <p><label>Username <input type="text" name="user_login" /></label></p>
  <p><label>Email <input type="email" name="user_email" /></label></p>
  <p><label>Password <input type="password" name="user_pass" /></label></p>
  <p><button type="submit">Register</button></p>
</form>
<p><a href="login">Already a member? Log in</a></p>
</body>
</html>
"""

INDEX = """<!DOCTYPE html>
<html>
<head><title>Community Portal</title></head>
<body>
<h1>Community Portal</h1>
<ul>
  <li><a href="register">Create an account</a></li>
  <li><a href="login">Log in</a></li>
</ul>
</body>
</html>
"""

LOGIN_PAGE = """<!DOCTYPE html>
<html>
<head><title>Log in</title></head>
<body>
<h1>Log in</h1>
{flashes}
<form method="post" action="login">
  <input type="hidden" name="wpfep_login" value="1" />
  <p><label>Username <input type="text" name="user_login" /></label></p>
  <p><label>Password <input type="password" name="user_pass" /></label></p>
  <p><button type="submit">Log in</button></p>
</form>
</body>
</html>
"""


def _flash_html(kind: str, text: str) -> str:
    return f'<div class="wpfep-{kind}">{text}</div>'


def sanitize_user(raw: str) -> str:
    return _USERNAME_OK.sub("", raw.strip().lower())


def build_app(seed: int) -> FastAPI:
    app = FastAPI(title="regrole-fixture")
    nonce = derive("regrole", seed, "nonce", 10)
    state = {"users": {}, "last_registration": None}
    lock = threading.Lock()

    def register_page(flashes: str = "") -> HTMLResponse:
        return HTMLResponse(PAGE.format(nonce=nonce, flashes=flashes))

    @app.get("/", response_class=HTMLResponse)
    def index():
        return HTMLResponse(INDEX)

    @app.get("/register", response_class=HTMLResponse)
    def register_form():
        return register_page()

    @app.post("/register", response_class=HTMLResponse)
    async def register_submit(request: Request):
        form = await request.form()
        if not form.get("wpfep_registration"):
            # marker missing: handler never engages, page just re-renders
            return register_page()
        if form.get("_wpnonce") != nonce:
            return register_page(
                _flash_html("error", "Registration failed: please reload the form and try again.")
            )
        username = sanitize_user(str(form.get("user_login", "")))
        email = str(form.get("user_email", "")).strip()
        password = str(form.get("user_pass", ""))
        if not username or "@" not in email:
            return register_page(_flash_html("error", "Username and email are required."))
        with lock:
            if username in state["users"]:
                return register_page(
                    _flash_html("error", "That username or email is already registered.")
                )
            requested = str(form.get("role", "")).strip()
            role = requested if requested in ROLES else "subscriber"
            state["users"][username] = {"email": email, "password": password, "role": role}
            state["last_registration"] = {"user": username, "role": role}
        return register_page(_flash_html("message", "Registration complete. Please log in."))

    @app.get("/login", response_class=HTMLResponse)
    def login_form():
        return HTMLResponse(LOGIN_PAGE.format(flashes=""))

    @app.post("/login", response_class=HTMLResponse)
    async def login_submit(request: Request):
        form = await request.form()
        username = sanitize_user(str(form.get("user_login", "")))
        with lock:
            user = state["users"].get(username)
        if user and user["password"] == str(form.get("user_pass", "")):
            flash = _flash_html("message", f"Welcome back, {username}.")
        else:
            flash = _flash_html("error", "Invalid username or password.")
        return HTMLResponse(LOGIN_PAGE.format(flashes=flash))

    @app.get("/__state/last_registration")
    def last_registration(request: Request):
        require_loopback(request)
        with lock:
            return JSONResponse(state["last_registration"] or {})

    @app.post("/__reset")
    def reset(request: Request):
        require_loopback(request)
        with lock:
            state["users"].clear()
            state["last_registration"] = None
        return {"reset": True}

    return app
