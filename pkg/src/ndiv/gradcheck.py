"""Central finite-difference gradients for checking ``backward``."""

import numpy as np

from . import diffcore


def numerical_gradient(fn, x, step=1e-5):
    """Central-difference gradient of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradient(build_loss, inputs, step=1e-5):
    """Compare analytic and numeric gradients of ``build_loss`` at ``inputs``.

    ``build_loss`` maps a list of Tensors to a scalar Tensor. Returns the
    worst relative error over all inputs.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [diffcore.Tensor(x, requires_grad=True) for x in inputs]
    grads = diffcore.backward(build_loss(leaves))
    worst = 0.0
    for k, x in enumerate(inputs):
        def scalar(xk, k=k):
            args = [diffcore.Tensor(v) for v in inputs]
            args[k] = diffcore.Tensor(xk)
            with diffcore.no_grad():
                return build_loss(args).item()

        numeric = numerical_gradient(scalar, x, step)
        analytic = grads.get(leaves[k], np.zeros_like(x))
        worst = max(worst, relative_error(analytic, numeric))
    return worst
