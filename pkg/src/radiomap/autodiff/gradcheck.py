"""Central finite-difference gradient checks."""
from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, precision


def numeric_grad(fn, tensor: Tensor, eps: float = 1e-5, indices=None) -> np.ndarray:
    """d fn() / d tensor by central differences; ``fn`` returns a scalar Tensor.

    With ``indices`` (flat positions) only those entries are estimated; the
    result then has one value per index.
    """
    flat = tensor.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    out = np.zeros(len(positions), dtype=np.float64)
    for n, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + eps
        up = float(fn().data)
        flat[i] = old - eps
        down = float(fn().data)
        flat[i] = old
        out[n] = (up - down) / (2 * eps)
    return out.reshape(tensor.data.shape) if indices is None else out


def relative_error(a: np.ndarray, b: np.ndarray, scale: float = 0.0) -> float:
    """max |a - b| over the larger max magnitude (or ``scale`` when that is bigger)."""
    scale = max(np.abs(a).max(), np.abs(b).max(), scale, 1e-12)
    return float(np.abs(a - b).max() / scale)


def check_gradients(fn, tensors: list[Tensor], eps: float = 1e-5, samples: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Max error between analytic and numeric gradients over ``tensors``.

    Errors are relative to the largest analytic gradient entry across all
    ``tensors``, so parameters whose gradient vanishes by symmetry (a key bias
    under softmax) are not divided by round-off. Runs in float64; ``tensors``
    must already be float64 arrays. ``samples`` caps the entries checked per
    tensor (drawn from ``rng``).
    """
    rng = rng or np.random.default_rng(0)
    with precision(np.float64):
        for t in tensors:
            t.data = np.asarray(t.data, dtype=np.float64)
            t.grad = None
            t.requires_grad = True
        with Tape() as tape:
            loss = fn()
            tape.backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]
        scale = max(float(np.abs(a).max()) for a in analytic)
        worst = 0.0
        for t, a in zip(tensors, analytic):
            if samples is None or t.data.size <= samples:
                worst = max(worst, relative_error(a, numeric_grad(fn, t, eps), scale))
            else:
                idx = np.sort(rng.choice(t.data.size, samples, replace=False))
                worst = max(worst, relative_error(a.reshape(-1)[idx], numeric_grad(fn, t, eps, idx), scale))
        return worst
