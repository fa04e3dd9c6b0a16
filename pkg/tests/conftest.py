import numpy as np
import pytest

from geomdeeponet import autodiff as ad


def finite_difference_check(loss_fn, params, h=1e-6, max_entries=None, rng=None):
    """Max relative error between tape gradients and central differences.

    ``loss_fn(tape)`` must build the loss on ``tape`` (or compute it untracked
    when ``tape`` is None). Relative error uses a floor of 1e-3 of the
    largest gradient entry so entries whose true value is ~0 do not divide
    by zero.
    """
    tape = ad.Tape()
    loss = loss_fn(tape)
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    scale = max(float(np.abs(g).max()) for g in analytic.values())
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            up = loss_fn(None).item()
            flat[k] = orig - h
            down = loss_fn(None).item()
            flat[k] = orig
            fd = (up - down) / (2 * h)
            g = analytic[p.name].reshape(-1)[k]
            denom = max(abs(fd), 1e-3 * scale, 1e-8)
            worst = max(worst, abs(g - fd) / denom)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, echoed live and again in the terminal summary
CRITERIA_LINES = []


def record_criterion(number, title, passed, detail=""):
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    CRITERIA_LINES.append(line)
    print("\n" + line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
