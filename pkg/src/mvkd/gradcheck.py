"""Central finite-difference gradient checks (run in float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], float], array: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """d fn / d array by central differences, perturbing ``array`` in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


# Below this gradient magnitude the error is judged in absolute terms. Central
# differences in float64 carry ~1e-13 * |f| / h of roundoff, so a tensor whose
# true gradient is exactly zero (e.g. a key bias under softmax) would otherwise
# report noise / tiny as a large relative error.
GRAD_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """max |a - n| scaled by the largest gradient magnitude of either side.

    Scaling by the tensor-wide maximum (rather than per element) keeps
    near-zero entries from inflating the error through cancellation noise.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error over ``tensors`` between backward() and finite differences.

    ``loss_fn`` rebuilds the graph from the current tensor data and returns a
    scalar. With ``max_entries`` only a random subset of coordinates per
    tensor is perturbed (for large parameter sets).
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]

    def value() -> float:
        return float(loss_fn().item())

    worst = 0.0
    for t, a in zip(tensors, analytic):
        if max_entries is None or t.data.size <= max_entries:
            worst = max(worst, relative_error(a, numerical_grad(value, t.data, h)))
            continue
        gen = rng if rng is not None else np.random.default_rng(0)
        picks = gen.choice(t.data.size, size=max_entries, replace=False)
        flat = t.data.reshape(-1)
        num = np.empty(max_entries)
        for j, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            num[j] = (up - down) / (2.0 * h)
        worst = max(worst, relative_error(a.reshape(-1)[picks], num))
    return worst


def check_directional(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    rng: np.random.Generator,
    h: float = 1e-3,
    directions: int = 1,
) -> float:
    """Relative error of the analytic directional derivative along random unit directions.

    One direction spans every entry of every tensor at once, so a whole
    model costs two forward passes per direction instead of two per entry.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(t.shape) for t in tensors]
        norm = np.sqrt(sum(float((v**2).sum()) for v in vs))
        vs = [v / norm for v in vs]
        base = [t.data.copy() for t in tensors]
        values = []
        for sign in (1.0, -1.0):
            for t, b, v in zip(tensors, base, vs):
                t.data[...] = b + sign * h * v
            values.append(loss_fn().item())
        for t, b in zip(tensors, base):
            t.data[...] = b
        numeric = (values[0] - values[1]) / (2.0 * h)
        exact = sum(float((a * v).sum()) for a, v in zip(analytic, vs))
        worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), GRAD_FLOOR))
    return worst
