"""Batched Levenberg-Marquardt solver for small parameter vectors.

One call solves ``B`` independent least-squares problems in lock-step. Each
problem keeps its own damping and convergence state, and rows can be masked
out with zero weights so that problems with different sample counts share a
fixed-size array. Per-problem arithmetic never mixes across the batch axis,
so solving a problem alone or inside a batch gives bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# model(x) -> (residuals (B, N), jacobian (B, N, P))
ModelFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, x: np.ndarray, cost: float):
        self.x = x
        self.cost = cost
        super().__init__(f"{message}; last iterate {np.array2string(x, precision=6)}, cost {cost:.6g}")


@dataclass
class LMResult:
    x: np.ndarray  # (B, P)
    cost: np.ndarray  # (B,) weighted sum of squared residuals
    converged: np.ndarray  # (B,) bool
    iterations: np.ndarray  # (B,) iterations used until convergence


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve batched ``A x = b``; closed form for 3x3 systems."""
    if A.shape[-1] != 3:
        return np.linalg.solve(A, b[..., None])[..., 0]
    a, bb, c = A[..., 0, 0], A[..., 0, 1], A[..., 0, 2]
    d, e, f = A[..., 1, 0], A[..., 1, 1], A[..., 1, 2]
    g, h, i = A[..., 2, 0], A[..., 2, 1], A[..., 2, 2]
    co00 = e * i - f * h
    co01 = f * g - d * i
    co02 = d * h - e * g
    det = a * co00 + bb * co01 + c * co02
    inv = np.empty_like(A)
    inv[..., 0, 0] = co00
    inv[..., 1, 0] = co01
    inv[..., 2, 0] = co02
    inv[..., 0, 1] = c * h - bb * i
    inv[..., 1, 1] = a * i - c * g
    inv[..., 2, 1] = bb * g - a * h
    inv[..., 0, 2] = bb * f - c * e
    inv[..., 1, 2] = c * d - a * f
    inv[..., 2, 2] = a * e - bb * d
    return (inv * b[..., None, :]).sum(axis=-1) / det[..., None]


def _weighted_cost(r: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (w * r * r).sum(axis=-1)


def levenberg_marquardt(
    model: ModelFn,
    x0: np.ndarray,
    weights: np.ndarray | None = None,
    *,
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
    max_iter: int = 200,
    ftol: float = 1e-15,
    xtol: float = 1e-12,
    damping: float = 1e-3,
) -> LMResult:
    """Minimise ``sum(w * r**2)`` for every batch row with Marquardt scaling.

    Steps that leave the box ``[lower, upper]`` are projected back onto it.
    A row stops updating once its relative cost decrease or its relative
    step size falls under the tolerances.
    """
    x = np.array(x0, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    r, J = model(x)
    w = np.ones_like(r) if weights is None else np.broadcast_to(np.asarray(weights, dtype=float), r.shape)
    B, P = x.shape
    lo = np.full(P, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    hi = np.full(P, np.inf) if upper is None else np.asarray(upper, dtype=float)

    cost = _weighted_cost(r, w)
    lam = np.full(B, damping)
    done = np.zeros(B, dtype=bool)
    iterations = np.zeros(B, dtype=int)
    eye = np.eye(P)
    for _ in range(max_iter):
        if done.all():
            break
        Jw = J * w[..., None]
        A = (Jw[..., :, :, None] * J[..., :, None, :]).sum(axis=-3)
        g = (Jw * r[..., None]).sum(axis=-2)
        # Coordinates pinned at a bound with the descent direction pointing
        # outward are frozen for this iteration; projecting a full step
        # instead makes the solver crawl along the bound.
        active = ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))
        free = (~active).astype(float)
        A = A * free[:, :, None] * free[:, None, :] + active[:, :, None] * eye
        g = g * free
        diag = np.maximum(np.diagonal(A, axis1=-2, axis2=-1), 1e-12)
        M = A + lam[:, None, None] * diag[:, None, :] * eye
        step = _solve(M, -g) * free
        x_try = np.clip(x + step, lo, hi)
        r_try, J_try = model(x_try)
        cost_try = _weighted_cost(r_try, w)
        accept = (cost_try < cost) & ~done & np.isfinite(cost_try)
        actual_step = np.abs(x_try - x).max(axis=-1)
        scale = np.abs(x).max(axis=-1) + xtol
        small_step = actual_step <= xtol * scale
        small_gain = accept & (cost - cost_try <= ftol * cost)
        # A zero residual cannot be improved; stop rather than shrink forever.
        exact = cost <= 1e-30

        x = np.where(accept[:, None], x_try, x)
        r = np.where(accept[:, None], r_try, r)
        J = np.where(accept[:, None, None], J_try, J)
        cost = np.where(accept, cost_try, cost)
        lam = np.where(accept, np.maximum(lam * 0.3, 1e-12), np.minimum(lam * 10.0, 1e16))
        iterations = np.where(done, iterations, iterations + 1)
        done = done | small_gain | small_step | exact | (lam >= 1e16)
    return LMResult(x=x, cost=cost, converged=done, iterations=iterations)
