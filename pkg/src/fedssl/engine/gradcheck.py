"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def numerical_grad(fn: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn / d t by central differences, perturbing ``t.data`` in place."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Norm-wise relative error, ``|a - n| / max(|a|, |n|, floor)``; 0 when all vanish.

    ``floor`` keeps entries whose true gradient is zero (say, a bias that a
    later standardization cancels) from comparing round-off against round-off.
    """
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
    joint: bool = False,
) -> list[float]:
    """Compare taped gradients of ``loss_fn()`` against finite differences.

    ``loss_fn`` must be a pure function of the tensors' current data (reset any
    stateful side effects such as BN running statistics inside it). Returns one
    relative error per tensor, or with ``joint`` a single error over the
    concatenation of all gradients (the whole-model view).
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape():
        loss = loss_fn()
        backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    for t in tensors:
        t.grad = None

    def value() -> float:
        return loss_fn().item()

    numeric = [numerical_grad(value, t, h) for t in tensors]
    if joint:
        flat = lambda gs: np.concatenate([g.ravel() for g in gs])
        return [relative_error(flat(analytic), flat(numeric), floor)]
    return [relative_error(a, n, floor) for a, n in zip(analytic, numeric)]
