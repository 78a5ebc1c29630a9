"""Finite-difference verification of analytic gradients.

``gradcheck`` compares reverse-mode gradients against central finite
differences, element by element, and reports the worst relative error
per input. Relative error uses a floor of 1.0 in the denominator so
near-zero gradients do not blow the ratio up:

    rel = |analytic - numeric| / max(1, |analytic|, |numeric|)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, backward, no_grad


@dataclass
class GradReport:
    """Outcome of one gradcheck run."""

    max_rel_error: float
    per_input: list[float]
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tol


def numeric_gradient(
    f: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` w.r.t. ``inputs[index]``."""
    target = inputs[index]
    grad = np.zeros_like(target.data)
    flat = grad.reshape(-1)
    base = target.data.copy()
    probe = [t if i != index else Tensor(base, requires_grad=False) for i, t in enumerate(inputs)]
    with no_grad():
        for j in range(base.size):
            orig = base.reshape(-1)[j]
            base.reshape(-1)[j] = orig + eps
            hi = f(*probe).item()
            base.reshape(-1)[j] = orig - eps
            lo = f(*probe).item()
            base.reshape(-1)[j] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError("non-finite value while probing finite differences")
            flat[j] = (hi - lo) / (2.0 * eps)
    return grad


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradReport:
    """Check analytic vs. numeric gradients of a scalar-valued function.

    Every input with ``requires_grad`` is probed. Raises on a non-scalar
    output; returns a report rather than asserting, so callers decide
    how to fail.
    """
    leaves = [Tensor(t.data.copy(), requires_grad=t.requires_grad) for t in inputs]
    out = f(*leaves)
    if out.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got output shape {out.shape}")
    backward(out)

    per_input: list[float] = []
    for i, leaf in enumerate(leaves):
        if not leaf.requires_grad:
            per_input.append(0.0)
            continue
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numeric_gradient(f, leaves, i, eps=eps)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        rel = np.abs(analytic - numeric) / denom
        per_input.append(float(rel.max()) if rel.size else 0.0)
    worst = max(per_input) if per_input else 0.0
    return GradReport(max_rel_error=worst, per_input=per_input, tol=tol)
