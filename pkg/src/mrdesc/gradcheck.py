"""Central finite-difference checks for the tensor engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def probe_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], probes: int = 20,
                    eps: float = 1e-6, rng: np.random.Generator | None = None,
                    per_param: int | None = None) -> list[tuple[int, tuple, float, float]]:
    """Compare backward() against central differences at random entries.

    ``loss_fn`` rebuilds the graph from the current parameter values. With
    ``per_param`` set, that many entries are probed in every parameter,
    otherwise ``probes`` entries are spread over all of them. Returns
    (param index, entry, analytic, numeric) tuples.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    if per_param is not None:
        picks = [(i, int(rng.integers(p.size))) for i, p in enumerate(params) for _ in range(per_param)]
    else:
        sizes = np.array([p.size for p in params])
        owners = rng.choice(len(params), size=probes, p=sizes / sizes.sum())
        picks = [(int(i), int(rng.integers(params[i].size))) for i in owners]
    results = []
    for i, flat in picks:
        p = params[i]
        idx = np.unravel_index(flat, p.shape)
        orig = p.data[idx].copy()
        p.data[idx] = orig + eps
        up = float(loss_fn().data)
        p.data[idx] = orig - eps
        down = float(loss_fn().data)
        p.data[idx] = orig
        results.append((i, tuple(int(v) for v in idx), float(grads[i][idx]), (up - down) / (2 * eps)))
    return results


def max_rel_error(results) -> float:
    return max((rel_error(a, n) for _, _, a, n in results), default=0.0)
