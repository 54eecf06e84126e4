import numpy as np
import pytest

from cuspflow.torus import TorusSpec, build_background


@pytest.fixture(scope="session")
def bg128():
    return build_background(TorusSpec())


@pytest.fixture(scope="session")
def bg64():
    return build_background(TorusSpec(nx=64, ny=64))


@pytest.fixture(scope="session")
def bg32():
    return build_background(TorusSpec(nx=32, ny=32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, reports: dict) -> bool:
    """Store one summary line for criterion ``number``; returns the overall verdict."""
    ok = all(bool(r) for r in reports.values())
    parts = []
    for name, r in reports.items():
        tol = "" if r.tolerance is None else f" tol={r.tolerance:.3g}"
        parts.append(f"{name}={'PASS' if r else 'FAIL'}(value={r.value:.4g}{tol})")
    ACCEPTANCE_LINES[number] = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: " + "; ".join(parts)
    print(ACCEPTANCE_LINES[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
