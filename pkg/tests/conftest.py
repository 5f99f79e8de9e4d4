import numpy as np
import pytest

from slmrec import autodiff as ad
from slmrec.data import InteractionRecord, build_dataset


def finite_difference(func, arrays, index, h=1e-5):
    """Central-difference gradient of scalar func w.r.t. arrays[index].

    ``func`` maps a list of float64 numpy arrays to a python float. Returns
    an array matching arrays[index]. Independent of the autodiff engine.
    """
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[index])
    flat = grad.reshape(-1)
    target = base[index].reshape(-1)
    for i in range(target.size):
        orig = target[i]
        target[i] = orig + h
        up = func(base)
        target[i] = orig - h
        down = func(base)
        target[i] = orig
        flat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    denom = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return np.abs(analytic - numeric).max() / denom


def check_gradient(build, arrays, rtol=1e-4, h=1e-5):
    """Compare autodiff gradients of ``build`` against central differences.

    ``build`` takes Tensors (float64) and returns a scalar Tensor. All
    input arrays are checked.
    """
    tensors = [ad.Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()

    def as_scalar(arrs):
        consts = [ad.Tensor(a.astype(np.float64)) for a in arrs]
        return float(build(*consts).data)

    for i, t in enumerate(tensors):
        numeric = finite_difference(as_scalar, arrays, i, h=h)
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        err = relative_error(analytic, numeric)
        assert err < rtol, f"input {i}: rel err {err:.2e} >= {rtol}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_records():
    """10 users x 6+ interactions over a small item set, fully deterministic."""
    rng = np.random.default_rng(99)
    records = []
    for u in range(10):
        t = 1000 * u
        for step in range(int(rng.integers(6, 10))):
            item = int(rng.integers(0, 8))
            records.append(
                InteractionRecord(f"u{u}", f"i{item}", 5.0, t)
            )
            t += 10
    return records


@pytest.fixture(scope="session")
def tiny_split():
    """Small but trainable corpus for fast end-to-end tests."""
    from slmrec.data import generate_synthetic

    records = generate_synthetic(n_users=80, n_items=40, seed=3, min_len=6, max_len=12)
    return build_dataset(records)
