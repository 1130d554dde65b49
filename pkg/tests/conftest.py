import numpy as np
import pytest

from evflight.events import EventStream


def random_stream(rng, n=1000, width=64, height=48, t_max=1_000_000):
    t = np.sort(rng.integers(0, t_max, n))
    return EventStream(width, height, rng.integers(0, width, n), rng.integers(0, height, n),
                       np.where(rng.random(n) < 0.5, 1, -1), t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
