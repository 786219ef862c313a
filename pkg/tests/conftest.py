import os
import sys

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from ir import read_program  # noqa: E402

FIXTURES = os.path.join(ROOT, "fixtures")


@pytest.fixture
def fixture_path():
    def path(name):
        return os.path.join(FIXTURES, name)
    return path


@pytest.fixture
def load():
    def read(name):
        return read_program(os.path.join(FIXTURES, name))
    return read
