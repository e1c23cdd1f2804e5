import numpy as np
import pytest

from dystan.autodiff import backward


def gradcheck(f, tensors, h=1e-5):
    """Max scaled error between reverse-mode and central finite differences.

    Error is |numeric - analytic| / max(1, |numeric|, |analytic|): relative
    for large gradients, absolute for small ones, so fd truncation noise on
    near-zero entries cannot mask or fake a failure.
    """
    out = f()
    backward(out)
    grads = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(numeric - gflat[i]) / max(1.0, abs(numeric), abs(gflat[i]))
            worst = max(worst, err)
    return worst


def clear_grads(*tensors):
    for t in tensors:
        t.grad = None


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
