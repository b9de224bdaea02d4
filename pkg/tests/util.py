"""Shared test oracles: central finite differences and error metrics.

The finite-difference path only ever calls forward evaluation under
no_grad, so it stays independent of the reverse-mode code it checks.
"""
import numpy as np

from gptlab import autodiff as ad

FD_H = 1e-5
REL_FLOOR = 1e-6


def fd_grad(loss_fn, tensor, h=FD_H):
    """Central finite differences of a scalar loss w.r.t. one tensor.

    loss_fn re-evaluates the loss from current tensor contents; the
    tensor is perturbed in place and restored.
    """
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with ad.no_grad():
            up = float(loss_fn().data)
        flat[i] = orig - h
        with ad.no_grad():
            down = float(loss_fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_err(analytic, numeric, floor=REL_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
