import numpy as np
import pytest

from histotex.tensor import Tensor


def finite_difference_grads(f, arrays, h=1e-3):
    """Central-difference gradients of a scalar function of float arrays.

    ``f`` receives float64 copies of ``arrays`` and must return a float; the
    perturbed forward passes therefore run in double precision while the
    analytic gradients under test come from the float32 production path.
    """
    arrays64 = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    grads = []
    for a in arrays64:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays64)
            flat[i] = orig - h
            fm = f(*arrays64)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=0.1):
    """Elementwise |a-n| / max(|a|,|n|,floor), maximised over the array."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def assert_grads_close(f_scalar, tensors, h=1e-3, tol=1e-3):
    """Run f on float32 tensors, backprop, and compare against the FD oracle."""
    from histotex.tensor import backward

    loss = f_scalar(*tensors)
    backward(loss)

    def f64(*arrays):
        t64 = [Tensor(a, requires_grad=False, dtype=np.float64) for a in arrays]
        return float(f_scalar(*t64).data)

    numeric = finite_difference_grads(f64, [t.data for t in tensors], h=h)
    for t, num in zip(tensors, numeric):
        assert t.grad is not None, "missing analytic gradient"
        err = max_rel_err(t.grad, num)
        assert err < tol, f"gradient mismatch: max rel err {err:.2e} >= {tol}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
