import numpy as np
import pytest
from hypothesis import settings

from softseg.ontology import load_ontology, toy_ontology

settings.register_profile("softseg", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("softseg")


@pytest.fixture(scope="session")
def onto():
    return load_ontology()


@pytest.fixture(scope="session")
def toy():
    # benign + A, B at the top; e0 benign, e1/e2 under A, e3 under B
    return toy_ontology(("benign", "A", "B"), (0, 1, 1, 2))


def random_simplex(rng, shape, n_classes):
    x = rng.random(tuple(shape) + (n_classes,)) ** 3
    return x / x.sum(axis=-1, keepdims=True)


def central_fd(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at ``x`` (f64)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number, ok, detail=""):
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        print(ACCEPTANCE_LINES[number])
        return ok
    return record


def pytest_runtest_logreport(report):
    # a skipped criterion still gets its line
    if report.skipped and "test_acceptance" in report.nodeid and report.when in ("setup", "call"):
        num = report.nodeid.split("criterion_")[-1].split("_")[0]
        if num.isdigit():
            reason = report.longrepr[-1] if isinstance(report.longrepr, tuple) else ""
            ACCEPTANCE_LINES[int(num)] = f"criterion {num}: SKIP  {reason}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[num])
