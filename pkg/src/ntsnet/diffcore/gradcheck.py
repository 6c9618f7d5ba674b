from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParamSet
from .tensor import Tensor, no_grad, record_branches


class NumericalError(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple[str, int] | None = None
    # coordinates whose +/- epsilon probes land on different smooth pieces
    skipped: list[tuple[str, int]] = field(default_factory=list)

    def __float__(self) -> float:
        return self.max_rel_error


def _sample_coordinates(params: ParamSet, n_coords: int, rng: np.random.Generator) -> list[tuple[str, int]]:
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    if total <= n_coords:
        return [(n, i) for n, s in zip(names, sizes) for i in range(s)]
    coords = {(n, int(rng.integers(s))) for n, s in zip(names, sizes)}
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    while len(coords) < max(n_coords, len(names)):
        flat = int(rng.integers(total))
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        coords.add((names[k], flat - int(offsets[k])))
    return sorted(coords)


def grad_check(
    graph: Callable[[ParamSet], Tensor],
    params: ParamSet,
    epsilon: float = 1e-5,
    n_coords: int = 100,
    seed: int = 0,
    grad_transform: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``graph(params)`` to central differences.

    The graph runs on a float64 copy of ``params``. The relative error of a
    coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    Coordinates where a non-smooth op (ReLU, max-pool, hinge, a discrete
    selection) takes a different branch under the +/- probes are skipped
    and listed in the report.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    p64 = params.copy(np.float64)
    p64.zero_grad()
    with record_branches() as base_log:
        loss = graph(p64)
    if loss.size != 1:
        raise ValueError(f"graph must return a scalar, got shape {loss.shape}")
    loss.backward()
    analytic = {n: t.grad.copy() for n, t in p64.items()}
    if grad_transform is not None:
        analytic = {n: grad_transform(n, g) for n, g in analytic.items()}

    rng = np.random.default_rng(seed)
    worst, worst_err, checked = None, 0.0, 0
    skipped: list[tuple[str, int]] = []
    for name, idx in _sample_coordinates(p64, n_coords, rng):
        flat = p64[name].data.reshape(-1)
        orig = flat[idx]
        values, same = [], True
        for step in (epsilon, -epsilon):
            flat[idx] = orig + step
            with no_grad(), record_branches() as log:
                values.append(float(graph(p64).data.reshape(-1)[0]))
            same = same and log == base_log
        flat[idx] = orig
        a = float(analytic[name].reshape(-1)[idx])
        if not (np.isfinite(values).all() and np.isfinite(a)):
            raise NumericalError(f"non-finite value at {name}[{idx}]")
        if not same:
            skipped.append((name, idx))
            continue
        num = (values[0] - values[1]) / (2 * epsilon)
        err = abs(a - num) / max(1.0, abs(a), abs(num))
        checked += 1
        if err > worst_err or worst is None:
            worst, worst_err = (name, idx), err
    return GradCheckReport(worst_err, checked, worst, skipped)
