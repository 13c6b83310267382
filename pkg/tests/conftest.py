import numpy as np
import pytest

from led.autodiff import Tape, Tensor, backward


@pytest.fixture
def gen():
    return np.random.default_rng(20240611)


def numerical_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def analytic_grads(loss_fn, tensors):
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape)
    return [grads[t] for t in tensors]


def check_gradients(loss_fn, tensors, tol, eps=1e-6):
    """Worst relative error between tape gradients and central differences."""
    analytic = analytic_grads(loss_fn, tensors)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        num = numerical_grad(lambda: loss_fn().item(), t.data, eps)
        worst = max(worst, rel_err(a, num))
    assert worst < tol, worst
    return worst


def param(gen, *shape, low=None, high=None):
    data = gen.uniform(low, high, size=shape) if low is not None else gen.standard_normal(shape)
    return Tensor(data, requires_grad=True)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def report(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
