from __future__ import annotations

import sys
from pathlib import Path

import pytest

_here = Path(__file__).resolve().parent
for path in (str(_here), str(_here.parents[0] / "src"), str(_here.parents[1] / "tests")):
    if path not in sys.path:
        sys.path.insert(0, path)

from sidecar_helpers import SHARED_FIXTURES  # noqa: E402


@pytest.fixture
def shared_fixtures() -> Path:
    return SHARED_FIXTURES
