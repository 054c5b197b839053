"""Finite-difference verification of reverse-mode gradients.

Central differences with step 1e-3 on float64 values, compared against the
recorded-graph gradient coordinate by coordinate.  The relative error uses
max(|analytic|, |numeric|, 1e-8) as denominator so near-zero gradients do
not blow up the ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor

FD_STEP = 1e-3
_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    op_name: str
    tolerance: float
    max_rel_error: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    passed: bool = False
    failure_location: str | None = None

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        loc = f" ({self.failure_location})" if self.failure_location else ""
        return (
            f"{status} grad_check[{self.op_name}]: max rel error "
            f"{self.max_rel_error:.3e} vs tolerance {self.tolerance:.1e}{loc}"
        )


def grad_check(
    op_closure: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    step: float = FD_STEP,
    op_name: str = "op",
) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar-valued closure against
    central finite differences over every coordinate of every parameter."""
    report = GradCheckReport(op_name=op_name, tolerance=tolerance)

    leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
              for k, v in params.items()}
    out = op_closure(leaves)
    if out.data.size != 1:
        raise ValueError("grad_check closure must return a scalar")
    out.backward()

    analytic: dict[str, np.ndarray] = {}
    for name, leaf in leaves.items():
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if not np.all(np.isfinite(grad)):
            bad = np.argwhere(~np.isfinite(grad))[0]
            report.max_rel_error = np.inf
            report.failure_location = f"non-finite gradient at {name}{tuple(bad)}"
            report.passed = False
            return report
        analytic[name] = grad

    values = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate() -> float:
        frozen = {k: Tensor(v) for k, v in values.items()}
        return op_closure(frozen).item()

    worst = 0.0
    worst_loc = None
    for name, theta in values.items():
        flat = theta.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        param_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = evaluate()
            flat[i] = orig - step
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(grad_flat[i]), abs(numeric), _FLOOR)
            rel = abs(grad_flat[i] - numeric) / denom
            if rel > param_worst:
                param_worst = rel
            if rel > worst:
                worst = rel
                worst_loc = f"{name}[{i}]"
        report.per_param[name] = param_worst

    report.max_rel_error = worst
    report.passed = worst <= tolerance
    if not report.passed:
        report.failure_location = worst_loc
    return report
