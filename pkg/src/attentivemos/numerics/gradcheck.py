"""Central finite-difference check of tape gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .optim import zero_grad
from .tensor import Parameter, Tensor, no_grad, trace_branches


@dataclass
class CoordinateCheck:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    # a max-pool argmax or abs sign flipped inside [p - h, p + h]
    crosses_kink: bool = False


@dataclass
class GradcheckReport:
    tol: float
    checks: list = field(default_factory=list)

    @property
    def smooth(self) -> list:
        """Checks whose stencil stayed on one differentiable branch."""
        return [c for c in self.checks if not c.crosses_kink]

    @property
    def kinks(self) -> list:
        return [c for c in self.checks if c.crosses_kink]

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.smooth), default=0.0)

    @property
    def failures(self) -> list:
        return [c for c in self.smooth if c.rel_error >= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def n_checked(self) -> int:
        return len(self.checks)

    def groups(self) -> set:
        return {c.name for c in self.checks}

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: {self.n_checked} coordinates over {len(self.groups())} "
            f"parameters, max rel err {self.max_rel_error:.3e} (tol {self.tol:.0e}), "
            f"{len(self.kinks)} skipped at kinks"
        )


def relative_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _sample_indices(p: Parameter, k: int, rng: np.random.Generator) -> list:
    flat = rng.choice(p.size, size=min(k, p.size), replace=False)
    return [np.unravel_index(int(i), p.shape) for i in np.sort(flat)]


def _eval(f) -> tuple:
    with trace_branches() as trace:
        value = float(f().data)
    return value, trace


def _central(f, p: Parameter, idx, h: float, base_trace) -> tuple:
    """Central difference and whether either endpoint left the base branch."""
    orig = p.data[idx].copy()
    try:
        p.data[idx] = orig + h
        up, t_up = _eval(f)
        p.data[idx] = orig - h
        down, t_down = _eval(f)
    finally:
        p.data[idx] = orig
    return (up - down) / (2.0 * h), (t_up != base_trace or t_down != base_trace)


def finite_diff_gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-5,
    n_samples: int | None = None,
    seed: int = 0,
    floor: float = 1e-5,
    richardson: bool = False,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> GradcheckReport:
    """Compare ``backward`` against ``(f(p+h) - f(p-h)) / 2h`` coordinate-wise.

    With ``n_samples`` set, coordinates are drawn evenly across parameters so
    every group is represented; otherwise every coordinate is checked.
    ``richardson=True`` combines the central differences at ``h`` and ``h/2``
    as ``(4 D(h/2) - D(h)) / 3``, cancelling the O(h^2) error term so a larger
    ``h`` (less roundoff) can be used. ``floor`` bounds the relative-error
    denominator from below for near-zero gradients.

    Finite differences are meaningless across a non-differentiable point, so
    every evaluation traces the branch taken by piecewise ops (max-pool argmax,
    sign of ``abs``). A coordinate whose stencil changes branch is kept in the
    report with ``crosses_kink=True`` but does not count toward ``passed``.

    ``analytic`` maps parameter names to gradients computed elsewhere (for
    example by a 32-bit copy of the model); by default they come from
    ``f().backward()``.
    """
    params = list(params)
    if analytic is None:
        zero_grad(params)
        f().backward()
        grads = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}
    else:
        grads = {id(p): np.asarray(analytic[p.name], dtype=np.float64) for p in params}

    rng = np.random.default_rng(seed)
    per_param = None if n_samples is None else max(1, math.ceil(n_samples / len(params)))
    report = GradcheckReport(tol=tol)
    with no_grad():
        _, base_trace = _eval(f)
        for p in params:
            if per_param is None:
                indices = list(np.ndindex(p.shape))
            else:
                indices = _sample_indices(p, per_param, rng)
            for idx in indices:
                numeric, kink = _central(f, p, idx, h, base_trace)
                if richardson:
                    half, kink_half = _central(f, p, idx, h / 2.0, base_trace)
                    numeric, kink = (4.0 * half - numeric) / 3.0, kink or kink_half
                a = float(grads[id(p)][idx])
                report.checks.append(
                    CoordinateCheck(p.name, tuple(int(i) for i in idx), a, numeric,
                                    relative_error(a, numeric, floor), kink)
                )
    zero_grad(params)
    return report
