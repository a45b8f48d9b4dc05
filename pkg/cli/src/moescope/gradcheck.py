"""
Central finite-difference checks for the analytic gradients produced by
tensor.Tape. Used by the test-suite and handy when adding a new operation.
"""

import numpy as np

from .tensor import Tape, Tensor, backward


def numerical_gradient(scalar_fn, array, step=1e-5):
    """
    Central differences of scalar_fn() with respect to every entry of array.
    The array is perturbed in place (and restored), so scalar_fn must read
    it rather than a copy.

    :param scalar_fn: zero-argument callable returning a float
    :param array: contiguous float64 numpy array
    :param step: finite-difference step h

    """
    flat = array.reshape(-1)
    if not np.shares_memory(flat, array):
        raise ValueError("array must be contiguous to be perturbed in place")
    grad = np.zeros(flat.shape, dtype=array.dtype)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = scalar_fn()
        flat[i] = original - step
        minus = scalar_fn()
        flat[i] = original
        grad[i] = (plus - minus) / (2 * step)
    return grad.reshape(array.shape)


def relative_error(analytic, numeric, floor=1e-8):
    """
    Largest absolute difference, relative to the largest magnitude found in
    either gradient (floored so all-zero gradients compare cleanly).
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(loss_fn, params, step=1e-5):
    """
    Compares the tape gradients of loss_fn against central differences for
    every named parameter.

    :param loss_fn: callable taking {name: Tensor} and returning a scalar
        Tensor
    :param params: {name: float64 numpy array}
    :returns: {name: relative error}

    """
    tape = Tape()
    watched = {
        name: tape.watch(array, name=name) for name, array in params.items()
    }
    grads = backward(loss_fn(watched))

    def scalar_fn():
        constants = {name: Tensor(array) for name, array in params.items()}
        return loss_fn(constants).item()

    errors = {}
    for name, array in params.items():
        analytic = grads.get(watched[name].node_id, np.zeros_like(array))
        numeric = numerical_gradient(scalar_fn, array, step=step)
        errors[name] = relative_error(analytic, numeric)
    return errors
