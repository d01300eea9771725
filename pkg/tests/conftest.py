import numpy as np
import pytest

from hazekd import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradcheck(f, tensors, step=1e-3, tol=1e-4):
    """Assert analytic gradients of scalar f(tensors) match central finite
    differences.  Tensors must be float64 parameters; f builds the graph
    from scratch each call (the tape is created here)."""
    from oracles import finite_diff_grads, max_rel_err

    for t in tensors:
        assert t.dtype == np.float64, "gradcheck replays the graph in float64"
        t.zero_grad()
    with T.Tape() as tape:
        loss = f()
    tape.backward(loss, params=tensors)
    analytic = [t.grad.copy() for t in tensors]

    def scalar():
        with T.no_grad():
            return f().item()

    numeric = finite_diff_grads(scalar, tensors, step=step)
    worst = max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3e}"
    return worst
