"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, zero_grads


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst: tuple[str, tuple[int, ...]] | None = None
    errors: list[float] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    num_samples: int | None = None,
    h: float = 1e-5,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> GradCheckResult:
    """Compare tape gradients against central differences.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    With ``num_samples`` set, that many scalar entries are drawn uniformly
    across all parameter tables (at least one per table when possible);
    otherwise every entry is checked.
    """
    params = list(params)
    names = list(names) if names is not None else [p.name or f"p{i}" for i, p in enumerate(params)]
    zero_grads(params)
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    if num_samples is None:
        picks = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)]
    else:
        rng = np.random.default_rng(seed)
        picks = []
        for i, p in enumerate(params[:num_samples]):
            picks.append((i, tuple(int(k) for k in np.unravel_index(rng.integers(p.size), p.shape))))
        sizes = np.array([p.size for p in params], dtype=float)
        while len(picks) < num_samples:
            i = int(rng.choice(len(params), p=sizes / sizes.sum()))
            flat = int(rng.integers(params[i].size))
            picks.append((i, tuple(int(k) for k in np.unravel_index(flat, params[i].shape))))

    errors = []
    worst, worst_err = None, -1.0
    for i, idx in picks:
        p = params[i]
        orig = p.data[idx]
        p.data[idx] = orig + h
        up = loss_fn().item()
        p.data[idx] = orig - h
        down = loss_fn().item()
        p.data[idx] = orig
        numeric = (up - down) / (2 * h)
        err = relative_error(float(analytic[i][idx]), numeric)
        errors.append(err)
        if err > worst_err:
            worst, worst_err = (names[i], idx), err
    return GradCheckResult(max(errors) if errors else 0.0, len(picks), worst, errors)
