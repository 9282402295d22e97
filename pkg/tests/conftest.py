import numpy as np
import pytest

import medtex  # noqa: F401  (pins BLAS thread pools before numpy spins them up)
from medtex import data as D


def central_gradcheck(f, params, h=1e-4, tol=1e-3):
    """Central finite differences against analytic grads, in float64.

    ``f`` rebuilds the scalar loss from the current parameter values;
    ``params`` maps names to engine tensors.  Returns the worst relative
    error over every scalar parameter entry.
    """
    for p in params.values():
        p.grad = None
    f().backward()
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for n, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f().item()
            flat[j] = orig - h
            fm = f().item()
            flat[j] = orig
            num = (fp - fm) / (2.0 * h)
            rel = abs(num - gflat[j]) / max(abs(num), abs(gflat[j]), 1.0)
            worst = max(worst, rel)
    assert worst <= tol, f"gradient mismatch: worst relative error {worst:.3e} > {tol}"
    return worst


@pytest.fixture(scope="session")
def tiny_dataset32():
    """8-image 32x32 dataset shared by training-path tests."""
    return D.generate_dataset(4, 4, 32, seed=7)


@pytest.fixture(scope="session")
def small_dataset64():
    """Small 64x64 train/test pair for evaluation-path tests."""
    train = D.generate_dataset(10, 10, 64, seed=31, split="train")
    test = D.generate_dataset(6, 6, 64, seed=32, split="test")
    return train, test
