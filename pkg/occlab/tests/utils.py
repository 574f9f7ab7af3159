import numpy as np
from numpy.testing import assert_allclose

from occlab.mdp import GridworldSpec, build_cycle, build_gridworld

FD_STEP = 1e-5


def numeric_gradient(loss_fn, array, step=FD_STEP):
    """Central differences of loss_fn() with respect to every entry of `array`, perturbed in place."""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + step
        plus = loss_fn()
        array[index] = original - step
        minus = loss_fn()
        array[index] = original
        grad[index] = (plus - minus) / (2 * step)
    return grad


def assert_gradient_matches(analytic, numeric):
    assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def two_cycle(discount=0.5):
    return build_cycle(2, discount)


def open_grid(size=5, discount=0.9, **kwargs):
    return build_gridworld(GridworldSpec(size, size, **kwargs), discount)
