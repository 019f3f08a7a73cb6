"""Central finite-difference gradient checking.

The numerical side only ever evaluates the forward function under
:func:`~modpretrain.autograd.no_grad`; it shares nothing with the tape.
"""

import numpy as np

from .autograd import backward, no_grad


def numerical_grad(f, tensors, eps=1e-5):
    """Central differences of scalar ``f()`` with respect to each tensor's data."""
    grads = []
    with no_grad():
        for t in tensors:
            g = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                plus = f().item()
                flat[i] = orig - eps
                minus = f().item()
                flat[i] = orig
                gflat[i] = (plus - minus) / (2.0 * eps)
            grads.append(g)
    return grads


def analytic_grad(f, tensors):
    for t in tensors:
        t.grad = None
    backward(f())
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def relative_error(analytic, numeric, floor=1e-8):
    """Element-wise ``|a - n| / (|n| + floor)``."""
    return np.abs(analytic - numeric) / (np.abs(numeric) + floor)


def max_relative_error(f, tensors, eps=1e-5, floor=1e-8):
    """Largest element-wise relative error between tape and finite differences.

    ``floor`` keeps entries near zero, where difference round-off dominates,
    from reading as large relative errors.
    """
    worst = 0.0
    for a, n in zip(analytic_grad(f, tensors), numerical_grad(f, tensors, eps)):
        if a.size:
            worst = max(worst, float(relative_error(a, n, floor).max()))
    return worst
