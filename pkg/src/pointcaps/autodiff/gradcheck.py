"""Central-difference gradient oracle."""

from dataclasses import dataclass, field

import numpy as np

from pointcaps.autodiff.tensor import Tensor, no_grad
from pointcaps.errors import UsageError

# below this magnitude errors are measured absolutely
ABS_FLOOR = 1e-6


@dataclass
class GradcheckReport:
    name: str
    tolerance: float
    errors: list = field(default_factory=list)

    @property
    def max_error(self):
        return max(self.errors, default=0.0)

    @property
    def passed(self):
        return bool(np.isfinite(self.max_error) and self.max_error <= self.tolerance)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_error:.3e} (tol {self.tolerance:g})"


def relative_error(analytic, numeric, floor=ABS_FLOOR):
    """Element-wise ``|a - n| / max(|a|, |n|, floor)``, reduced by max."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(f, inputs, index, step=1e-5, order=2):
    """Central-difference gradient of scalar ``f`` w.r.t. ``inputs[index]``.

    ``order=2`` is the two-point quotient ``(f(x+h) - f(x-h)) / 2h``;
    ``order=4`` the four-point stencil
    ``(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h``, whose truncation
    error is O(h^4) and so allows a larger, less round-off-prone step.
    """
    if order not in (2, 4):
        raise UsageError(f"finite-difference order must be 2 or 4, got {order}")
    x = inputs[index]
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)

    def at(i, value):
        flat[i] = value
        return float(f(*inputs).data)

    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            if order == 2:
                gflat[i] = (at(i, orig + step) - at(i, orig - step)) / (2.0 * step)
            else:
                near = at(i, orig + step) - at(i, orig - step)
                far = at(i, orig + 2 * step) - at(i, orig - 2 * step)
                gflat[i] = (8.0 * near - far) / (12.0 * step)
            flat[i] = orig
    return grad


def gradcheck(f, inputs, step=1e-5, tolerance=1e-4, name="f", order=2):
    """Compare ``backward`` against central differences for every input element.

    ``f`` maps the input tensors to a scalar tensor. All inputs must be float64
    tensors with ``requires_grad``; the report holds one error per input.
    """
    for t in inputs:
        if not isinstance(t, Tensor) or t.dtype != np.float64:
            raise UsageError("gradcheck needs float64 Tensor inputs (use precision('f64'))")
        if not t.requires_grad:
            raise UsageError("gradcheck inputs must have requires_grad=True")
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise UsageError(f"gradcheck needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    report = GradcheckReport(name=name, tolerance=tolerance)
    for i, t in enumerate(inputs):
        analytic = t.grad.copy()
        numeric = numeric_grad(f, inputs, i, step, order)
        report.errors.append(relative_error(analytic, numeric))
    return report
