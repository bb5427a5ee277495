import numpy as np
import pytest

from cndbench.datasets import SequenceSpec, generate_sequence


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


@pytest.fixture(scope="session")
def small_seq():
    return generate_sequence(SequenceSpec(num_stages=3, classes_per_stage=3, input_dim=8, train_per_class=40,
                                          val_per_class=10, test_per_class=20, ood_per_class=20, seed=3))
