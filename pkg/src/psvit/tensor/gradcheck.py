"""Central finite-difference gradient checking."""

import numpy as np

from .tensor import backward


def numerical_grad(fn, tensor, h=1e-5, indices=None):
    """Central-difference estimate of d fn() / d tensor, one entry at a time.

    ``fn`` must rebuild the graph from scratch and return a scalar Tensor.
    ``indices`` restricts the estimate to selected flat positions (others stay 0).
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(tensor.shape)


def max_rel_error(fn, tensors, h=1e-5, indices=None):
    """Largest |g_ad - g_fd| / max(1, |g_fd|) over every entry of ``tensors``.

    Returns ``(error, per_tensor)`` where ``per_tensor`` maps a label to that
    tensor's worst error.
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    worst = 0.0
    per = {}
    for n, t in enumerate(tensors):
        idx = None if indices is None else indices.get(n)
        fd = numerical_grad(fn, t, h=h, indices=idx)
        ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        if idx is not None:
            ad = ad.reshape(-1)[idx]
            fd = fd.reshape(-1)[idx]
        err = float(np.max(np.abs(ad - fd) / np.maximum(1.0, np.abs(fd)))) if np.size(fd) else 0.0
        per[t.name or f"#{n}"] = err
        worst = max(worst, err)
    return worst, per
