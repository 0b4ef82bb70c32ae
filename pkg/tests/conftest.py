"""Shared fixtures and independent finite-difference oracles."""

from __future__ import annotations

import numpy as np
import pytest

from srrnet import tensor as T


def fd_grad(loss_fn, tensor, step: float = 1e-6) -> np.ndarray:
    """Independent central-difference gradient oracle over every entry.

    Deliberately separate from the package's own gradcheck module so that the
    two implementations cross-check each other.
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        original = flat[i]
        with T.no_grad():
            flat[i] = original + step
            f_plus = float(loss_fn().data)
            flat[i] = original - step
            f_minus = float(loss_fn().data)
        flat[i] = original
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(tensor.data.shape)


def analytic_grad(loss_fn, tensor) -> np.ndarray:
    tensor.grad = None
    loss = loss_fn()
    T.backward(loss)
    assert tensor.grad is not None, "no gradient reached the probed tensor"
    return tensor.grad.copy()


def assert_grad_matches(loss_fn, tensor, step: float = 1e-6,
                        rtol: float = 1e-5, atol: float = 1e-7):
    a = analytic_grad(loss_fn, tensor)
    f = fd_grad(loss_fn, tensor, step=step)
    np.testing.assert_allclose(a, f, rtol=rtol, atol=atol)


acceptance_lines: list[str] = []
"""Verdict lines recorded by tests/test_acceptance.py, echoed after the run."""


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_model():
    from srrnet.model import build_model
    return build_model("desk", seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
