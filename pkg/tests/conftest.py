import numpy as np
import pytest


def fd_grad(tape, out, store, name, h=1e-5):
    """Central-difference gradient of scalar `out` w.r.t. block `name`.

    Uses only tape replay (forward), never the reverse pass, so it stays an
    independent oracle for backward().
    """
    base = store.value(name).copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        for sign in (+1.0, -1.0):
            bumped = base.copy().reshape(-1)
            bumped[i] += sign * h
            store.set_value(name, bumped.reshape(base.shape))
            tape.forward()
            flat[i] += sign * float(out.value)
        flat[i] /= 2.0 * h
    store.set_value(name, base)
    tape.forward()
    return grad


def assert_close_grad(got, want, tol=1e-5):
    """Relative tolerance with an absolute floor of `tol` (values near zero
    would otherwise amplify finite-difference noise into false failures)."""
    got = np.asarray(got)
    want = np.asarray(want)
    scale = np.maximum(1.0, np.maximum(np.abs(got), np.abs(want)))
    worst = np.max(np.abs(got - want) / scale) if got.size else 0.0
    assert worst < tol, f"gradient mismatch: worst relative error {worst:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(42)
