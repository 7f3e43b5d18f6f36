"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from .core import Tensor, backward


class GradCheckReport(NamedTuple):
    error: float       # worst relative error beyond the rounding band
    raw_error: float   # same without the rounding allowance
    probed: int
    kinks: int         # coordinates skipped because the step straddled a kink


def finite_diff_report(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    skip_kinks: bool = False,
    kink_tol: float = 1e-2,
    grad_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare backprop against central differences coordinate by coordinate.

    Per coordinate the error is ``max(|a - n| - r, 0) / max(|a|, |n|, s)``
    where ``r = eps_mach * (|f(x+h)| + |f(x-h)|) / (2h)`` bounds the rounding
    error of the difference quotient itself, and
    ``s = max(1e-8, grad_floor * max|a|)`` over the same input keeps
    coordinates whose gradient is many orders below the rest from reporting
    pure summation noise as relative error.

    With ``skip_kinks``, a coordinate whose one-sided slopes differ by more
    than ``kink_tol`` (relative) is taken to straddle a non-differentiable
    point such as a ReLU hinge; it is counted in ``kinks`` and left out of the
    error. ``max_coords`` caps the coordinates probed per input (seeded choice).
    Inputs should be float64.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
    analytic = backward(f(*xs), xs)
    f0 = float(f(*xs).data) if skip_kinks else 0.0
    rng = np.random.default_rng(seed)
    worst = raw_worst = 0.0
    probed = kinks = 0
    for t, grad in zip(xs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        g = grad.reshape(-1)
        mach = np.finfo(t.dtype).eps
        floor = max(1e-8, grad_floor * float(np.abs(g).max(initial=0.0)))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*xs).data)
            flat[i] = orig - eps
            fm = float(f(*xs).data)
            flat[i] = orig
            probed += 1
            num = (fp - fm) / (2 * eps)
            rounding = mach * (abs(fp) + abs(fm)) / (2 * eps)
            if skip_kinks:
                right, left = (fp - f0) / eps, (f0 - fm) / eps
                if abs(right - left) > kink_tol * max(abs(right), abs(left), floor) + 4 * rounding:
                    kinks += 1
                    continue
            a = float(g[i])
            scale = max(abs(a), abs(num), floor)
            raw_worst = max(raw_worst, abs(a - num) / scale)
            worst = max(worst, max(abs(a - num) - rounding, 0.0) / scale)
    return GradCheckReport(worst, raw_worst, probed, kinks)


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    grad_floor: float = 1e-5,
) -> float:
    """Worst relative error between backprop and central differences (see ``finite_diff_report``)."""
    return finite_diff_report(f, x, eps, max_coords, seed, grad_floor=grad_floor).error
