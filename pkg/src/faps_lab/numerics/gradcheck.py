from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad, zero_grad


class NondeterminismError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    probes: int
    max_rel_error: float
    tolerance: float
    passed: bool
    worst: tuple[str, int] | None
    details: list


def rel_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(closure: Callable[[], Tensor], params: dict[str, Tensor],
                            probe_count: int = 32, epsilon: float = 1e-3,
                            tolerance: float = 1e-3, rng=None,
                            floor: float = 1e-8) -> GradCheckReport:
    """Compare backprop gradients with central differences on random parameter entries.

    ``closure`` rebuilds the scalar loss from the current parameter values. Run it
    under float64 for meaningful tolerances.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    rng = np.random.default_rng(0) if rng is None else rng
    with no_grad():
        f0 = float(closure().value)
        if float(closure().value) != f0:
            raise NondeterminismError("closure returned different values on identical inputs")

    zero_grad(params.values())
    backward(closure())
    names = list(params)
    sizes = np.array([params[n].value.size for n in names], dtype=float)
    details = []
    for _ in range(probe_count):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = params[name]
        idx = int(rng.integers(p.value.size))
        analytic = 0.0 if p.grad is None else float(p.grad.flat[idx])
        orig = p.value.flat[idx].copy()
        with no_grad():
            p.value.flat[idx] = orig + epsilon
            fp = float(closure().value)
            p.value.flat[idx] = orig - epsilon
            fm = float(closure().value)
        p.value.flat[idx] = orig
        numeric = (fp - fm) / (2 * epsilon)
        details.append((name, idx, analytic, numeric, rel_error(analytic, numeric, floor)))
    zero_grad(params.values())

    worst = max(details, key=lambda d: d[4]) if details else None
    max_err = worst[4] if worst else 0.0
    return GradCheckReport(
        probes=len(details), max_rel_error=max_err, tolerance=tolerance,
        passed=max_err <= tolerance, worst=(worst[0], worst[1]) if worst else None,
        details=details,
    )
