"""Central finite-difference gradient checks run in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, record_branches


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def numerical_gradient(f: Callable[[], float], t: Tensor, h: float = 1e-3,
                       indices: Sequence[tuple[int, ...]] | None = None, kink_aware: bool = False,
                       min_step: float = 1e-7) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t.data``.

    ``t.data`` is perturbed in place and restored. If ``indices`` is given,
    only those entries are estimated and the rest of the result is NaN.

    With ``kink_aware`` the relu/abs/clamp branch pattern is recorded at
    ``x``, ``x+h`` and ``x-h``. If the three disagree, the difference
    quotient spans a point where ``f`` is not differentiable, so the step is
    divided by 10 and retried, down to ``min_step``.
    """
    grad = np.full(t.shape, np.nan) if indices is not None else np.zeros(t.shape)
    flat_idx = indices if indices is not None else list(np.ndindex(t.shape))

    def at(idx, value):
        t.data[idx] = value
        with record_branches() as log:
            y = f()
        return y, log

    for idx in flat_idx:
        orig = t.data[idx]
        step = h
        if kink_aware:
            _, base = at(idx, orig)
        while True:
            fp, bp = at(idx, orig + step)
            fm, bm = at(idx, orig - step)
            if not kink_aware or step / 10 < min_step or (_same_branches(base, bp) and _same_branches(base, bm)):
                break
            step /= 10
        t.data[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-3,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    kink_aware: bool = False) -> float:
    """Return the worst elementwise relative error between backprop and finite differences.

    ``f`` must rebuild the graph on every call and return a scalar tensor.
    All ``tensors`` should hold float64 data. With ``max_entries`` set, at
    most that many randomly chosen entries of each tensor are compared.
    """
    for t in tensors:
        t.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]

    def scalar() -> float:
        return float(f().data.reshape(()))

    worst = 0.0
    for t, ga in zip(tensors, analytic):
        indices = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(t.size, size=max_entries, replace=False)
            indices = [np.unravel_index(p, t.shape) for p in picks]
        gn = numerical_gradient(scalar, t, h, indices, kink_aware)
        mask = ~np.isnan(gn)
        if mask.any():
            worst = max(worst, float(relative_error(ga[mask], gn[mask]).max()))
    return worst
