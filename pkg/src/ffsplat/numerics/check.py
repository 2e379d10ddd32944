"""Finite-difference gradient checking (float64)."""

import numpy as np

from .tensor import Tape, backward


def fd_gradients(f, tensors, eps=1e-6):
    """Central-difference gradients of scalar f() w.r.t. each tensor.

    f must recompute the loss from the tensors' current .data; entries are
    perturbed in place one at a time.
    """
    grads = []
    for t in tensors:
        if t.data.dtype != np.float64:
            raise TypeError("finite differences need float64 tensors")
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            fp = f().item()
            flat[i] = keep - eps
            fm = f().item()
            flat[i] = keep
            gf[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_err(f, tensors, eps=1e-6):
    """Worst relative error between tape gradients and finite differences.

    Relative error per entry: |ad - fd| / max(1, |ad|, |fd|).
    """
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    worst = 0.0
    for t, gfd in zip(tensors, fd_gradients(f, tensors, eps)):
        den = np.maximum(1.0, np.maximum(np.abs(t.grad), np.abs(gfd)))
        worst = max(worst, float((np.abs(t.grad - gfd) / den).max()))
    return worst
