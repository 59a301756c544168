import math

import numpy as np
import pytest

from voltreg.netmodel import (Busbar, LineSegment, LoadPoint, NetworkModel, PvInverter,
                              Transformer, load_fixture, validate)


def fixture_transformer():
    zb = 415.0 ** 2 / 400e3
    r = 0.04 * zb / math.sqrt(17.0)
    return Transformer(400.0, 11000.0, 415.0, 1.0 / complex(r, 4 * r))


def small_network(parents, r=0.02, x=0.008, rn=0.03, xn=0.008, loads=(), inverters=(),
                  transformer=None):
    """Network from a parent list (``parents[0]`` is ignored, busbar 0 is the root)."""
    n = len(parents)
    busbars = [Busbar(0, None, "abc")] + [Busbar(b, parents[b], "abc") for b in range(1, n)]
    rr = np.broadcast_to(np.asarray(r, dtype=float), (n - 1,))
    xx = np.broadcast_to(np.asarray(x, dtype=float), (n - 1,))
    lines = [LineSegment(parents[b], b, float(rr[b - 1]), float(xx[b - 1]), rn, xn, 30.0)
             for b in range(1, n)]
    model = NetworkModel(tuple(busbars), tuple(lines), transformer or fixture_transformer(),
                         tuple(LoadPoint(*ld) for ld in loads),
                         tuple(PvInverter(*inv) for inv in inverters), (0.95, 1.05))
    return validate(model)


@pytest.fixture(scope="session")
def lotus():
    return load_fixture()


def pytest_terminal_summary(terminalreporter):
    lines = getattr(pytest, "acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
