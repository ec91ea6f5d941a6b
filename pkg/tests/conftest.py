import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cutpoint.graph_ir import load_network, parse_network, plan_network  # noqa: E402
from cutpoint.zoo import model_path  # noqa: E402

import nets  # noqa: E402

ACCEPTANCE_LINES = []

_PLANS = {}


def shipped_plan(name):
    if name not in _PLANS:
        _PLANS[name] = plan_network(load_network(model_path(name)))
    return _PLANS[name]


def toy_plan(name, **kw):
    return plan_network(parse_network(nets.ALL[name](**kw)))


@pytest.fixture
def plan_of():
    return shipped_plan


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
