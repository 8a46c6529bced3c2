"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, precision


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    checked: int
    finite: bool
    tol: float

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_err <= self.tol


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f,
    inputs,
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` to central differences.

    ``inputs`` is a Tensor or a sequence of Tensors; every input is cast to
    float64 and the check runs in 64-bit mode. ``max_entries`` caps the
    number of probed coordinates per input (sampled without replacement).
    Entries whose gradients are both below ``floor`` are compared in
    absolute terms against ``floor``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        xs = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
        out = f(*xs)
        if out.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        finite = bool(np.isfinite(out.data).all())
        out.backward()
        worst_rel, worst_abs, checked = 0.0, 0.0, 0
        for x in xs:
            analytic = np.zeros_like(x.data) if x.grad is None else x.grad
            flat = x.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*[Tensor(v.data) for v in xs]).item()
                flat[i] = orig - eps
                fm = f(*[Tensor(v.data) for v in xs]).item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[idx]
            finite &= bool(np.isfinite(a).all() and np.isfinite(numeric).all())
            if len(idx):
                worst_rel = max(worst_rel, float(_rel_err(a, numeric, floor).max()))
                worst_abs = max(worst_abs, float(np.abs(a - numeric).max()))
            checked += len(idx)
    return GradCheckReport(worst_rel, worst_abs, checked, finite, tol)
