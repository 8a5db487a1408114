"""Self-contained vulnerable targets used for end-to-end validation runs.

Each fixture is a small FastAPI app, fully deterministic for a given
seed: secrets are derived with HMAC from the seed, state lives under a
pinned /tmp directory, and all HTML uses relative URLs so behavior is
identical on any port.
"""

from .runner import (  # noqa: F401
    FIXTURE_NAMES,
    FixtureHandle,
    build_app,
    fixture_manifest,
    fixture_state_dir,
    serve_fixture,
    start_fixture,
    stop_fixture,
)
