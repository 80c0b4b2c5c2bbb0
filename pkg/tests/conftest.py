import numpy as np
import pytest

from repiln.nn import BatchNorm1d


def randomize_norms(module, rng, dtype=None):
    """Give every norm layer non-trivial inference statistics and affine terms."""
    for m in module.modules():
        if isinstance(m, BatchNorm1d):
            c = m.gamma.shape[0]
            dt = dtype or m.gamma.dtype
            m.gamma.data = rng.uniform(0.5, 1.5, c).astype(dt)
            m.beta.data = rng.uniform(-0.2, 0.2, c).astype(dt)
            m.running_mean.data = rng.uniform(-0.3, 0.3, c).astype(dt)
            m.running_var.data = rng.uniform(0.5, 2.0, c).astype(dt)
    return module


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
