import numpy as np
import pytest

from fedrp.models import ARCH_LOGISTIC, ARCH_MLP, Batch, ModelSpec, loss


@pytest.fixture
def logistic_spec():
    return ModelSpec(architecture=ARCH_LOGISTIC, input_dim=5, num_classes=3)


@pytest.fixture
def mlp_spec():
    return ModelSpec(architecture=ARCH_MLP, input_dim=4, num_classes=2, hidden_dims=(3,))


def random_batch(spec: ModelSpec, size: int, seed: int) -> Batch:
    gen = np.random.default_rng(seed)
    return Batch(
        inputs=gen.normal(size=(size, spec.input_dim)),
        labels=gen.integers(0, spec.num_classes, size=size),
    )


def finite_difference_gradient(f, w: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference oracle; independent of any backprop code."""
    grad = np.empty_like(w)
    for j in range(w.size):
        wp = w.copy()
        wp[j] += step
        wm = w.copy()
        wm[j] -= step
        grad[j] = (f(wp) - f(wm)) / (2 * step)
    return grad


def model_loss_fd_gradient(spec: ModelSpec, w: np.ndarray, batch: Batch, step: float = 1e-5):
    return finite_difference_gradient(lambda v: loss(spec, v, batch), w, step)
