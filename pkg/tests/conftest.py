"""Shared helpers: an independent finite-difference oracle and tiny models."""

import sys

import numpy as np
import pytest

from chimera import model as M
from chimera.tensor import Tape, Tensor

H = 1e-5


def central_diff(f, arrays, h=H):
    """d f / d arrays[k] by central differences; f takes numpy arrays."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + h
            up = f(*arrays)
            a[i] = orig - h
            down = f(*arrays)
            a[i] = orig
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_err(analytic, numeric):
    """Max abs deviation relative to the largest numeric entry."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def input_grad_error(fn, arrays):
    """fn maps Tensors to a scalar Tensor; compares tape and FD gradients."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    tape.backward(out)
    numeric = central_diff(lambda *xs: fn(*[Tensor(x) for x in xs]).item(), arrays)
    return max(rel_err(t.grad, n) for t, n in zip(leaves, numeric))


def param_grad_error(loss_fn, params):
    """loss_fn(params) -> scalar Tensor; FD over every parameter entry."""
    params.zero_grad()
    with Tape() as tape:
        out = loss_fn(params)
    tape.backward(out)
    worst = 0.0
    for _, p in params.named_parameters():
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + H
            up = loss_fn(params).item()
            flat[i] = orig - H
            down = loss_fn(params).item()
            flat[i] = orig
            num.reshape(-1)[i] = (up - down) / (2 * H)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, rel_err(analytic, num))
    return worst


def tiny_model(seed=0, in_dim=3, classes=3, hidden=(4,), proj_hidden=0, proj_dim=3):
    return M.init_model(in_dim, classes, np.random.default_rng(seed), hidden, proj_hidden, proj_dim)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
