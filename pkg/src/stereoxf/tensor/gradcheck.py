"""Compare reverse-mode gradients against central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Tensor

DEFAULT_STEP = 1e-3


@dataclass
class InputReport:
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    n_checked: int
    n_excluded: int


@dataclass
class GradcheckReport:
    tolerance: float
    inputs: list[InputReport] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.inputs), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    @property
    def excluded(self) -> int:
        return sum(r.n_excluded for r in self.inputs)


def gradcheck(function: Callable[..., Tensor], inputs: Sequence[np.ndarray | Tensor],
              tolerance: float = 1e-3, step: float = DEFAULT_STEP,
              kink_ratio: float | None = None) -> GradcheckReport:
    """Check ``function(*inputs)`` (a scalar Tensor) against finite differences.

    Inputs are promoted to float64 so that the central difference at
    ``step`` resolves relative errors well below ``tolerance``. Elements
    where the one-sided slopes disagree by more than ``kink_ratio`` of the
    input's gradient scale (default ``2 * tolerance``) straddle a
    non-differentiable point (a tie in a max, |x| at 0, a ReLU hinge, a
    clamp boundary); a central difference cannot resolve them to
    ``tolerance``, so they are reported and excluded.

    The relative error of an input is max|analytic - numeric| divided by
    max|numeric| over its checked elements.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
              for x in inputs]

    def evaluate(vals):
        out = function(*[Tensor(v) for v in vals])
        return float(np.asarray(out.data, dtype=np.float64).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = function(*leaves)
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
                for leaf in leaves]

    if kink_ratio is None:
        kink_ratio = 2.0 * tolerance
    f0 = evaluate(arrays)
    report = GradcheckReport(tolerance=tolerance)
    for i, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        plus_slope = np.zeros_like(base)
        minus_slope = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = [a.copy() for a in arrays]
            vals[i][idx] = base[idx] + step
            fp = evaluate(vals)
            vals[i][idx] = base[idx] - step
            fm = evaluate(vals)
            numeric[idx] = (fp - fm) / (2 * step)
            plus_slope[idx] = (fp - f0) / step
            minus_slope[idx] = (f0 - fm) / step
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic[i]).max(initial=0.0), 1e-12)
        kink = np.abs(plus_slope - minus_slope) > kink_ratio * scale
        keep = ~kink
        if keep.any():
            err = np.abs(analytic[i] - numeric) * keep
            denom = max(np.abs(numeric[keep]).max(), 1e-12)
            worst = np.unravel_index(int(np.argmax(err)), base.shape)
            rel = float(err.max() / denom)
        else:
            worst, rel = None, 0.0
        report.inputs.append(InputReport(rel, tuple(int(j) for j in worst) if worst else None,
                                         int(keep.sum()), int(kink.sum())))
    return report
