"""Central-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import GraphError, Tensor, backward


class OracleError(RuntimeError):
    """The function under test is not deterministic, so differences are meaningless."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    worst_index: tuple[int, ...] | None = None
    analytic: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    numeric: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from blowing up."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _scalar(f: Callable[[], Tensor]) -> float:
    out = f()
    if out.data.size != 1:
        raise GraphError(f"grad_check needs a scalar function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-6,
    tol: float = 1e-3,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backward() against central differences for tensor ``x``.

    ``f`` is a zero-argument closure that reads ``x`` and returns a scalar.
    ``x`` is promoted to float64 for the duration so everything downstream
    of it is evaluated in double precision; its original dtype and gradient
    are restored afterwards.  ``max_checks`` samples that many coordinates
    instead of checking all of them.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    saved_data, saved_grad, saved_flag = x.data, x.grad, x.requires_grad
    x.data = saved_data.astype(np.float64)
    x.requires_grad = True
    try:
        first, second = _scalar(f), _scalar(f)
        if first != second:
            raise OracleError(f"function is not deterministic: {first!r} != {second!r}")

        x.grad = None
        loss = f()
        if loss.requires_grad:
            backward(loss)
            analytic_full = x.grad if x.grad is not None else np.zeros_like(x.data)
        else:
            analytic_full = np.zeros_like(x.data)

        flat = x.data.reshape(-1)
        n = flat.size
        if max_checks is not None and max_checks < n:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(n, size=max_checks, replace=False))
        else:
            idx = np.arange(n)

        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = _scalar(f)
            flat[i] = orig - h
            f_minus = _scalar(f)
            flat[i] = orig
            numeric[k] = (f_plus - f_minus) / (2.0 * h)
        analytic = np.asarray(analytic_full, dtype=np.float64).reshape(-1)[idx]
    finally:
        x.data, x.grad, x.requires_grad = saved_data, saved_grad, saved_flag

    if idx.size == 0:
        return GradCheckReport(0.0, tol, 0)
    err = relative_error(analytic, numeric, floor)
    worst = int(np.argmax(err))
    return GradCheckReport(
        max_rel_error=float(err[worst]),
        tol=tol,
        checked=int(idx.size),
        worst_index=tuple(int(v) for v in np.unravel_index(idx[worst], saved_data.shape)),
        analytic=analytic,
        numeric=numeric,
    )
