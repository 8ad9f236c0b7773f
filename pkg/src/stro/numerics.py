"""Small numerical kernels: CG, a feasible backtracking line search, a
projected-gradient box solver and central finite differences."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CgConfig:
    max_iters: int | None = None  # None -> 10 * dim
    residual_tol: float = 1e-8
    damping: float = 0.0

    def __post_init__(self):
        if self.residual_tol <= 0.0:
            raise ValueError("residual_tol must be positive")


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual_norms: list[float] = field(default_factory=list)
    # 0.5 x'Ax - b'x along the iterates; CG decreases this monotonically
    energies: list[float] = field(default_factory=list)


def conjugate_gradient(apply_A: Callable[[np.ndarray], np.ndarray], b: np.ndarray, config: CgConfig = CgConfig()) -> CgResult:
    """Solve ``(A + damping I) x = b`` for symmetric positive definite ``A``.

    Stops once ``||A x - b|| <= residual_tol * ||b||``; ``converged`` is False
    if ``max_iters`` ran out first.
    """
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise FloatingPointError("non-finite right-hand side")
    max_iters = config.max_iters if config.max_iters is not None else 10 * b.size

    def op(v):
        return apply_A(v) + config.damping * v

    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    b_norm = np.sqrt(rr)
    result = CgResult(x=x, iterations=0, converged=False, residual_norms=[b_norm], energies=[0.0])
    if b_norm == 0.0:
        result.converged = True
        return result
    threshold = config.residual_tol * b_norm
    for it in range(1, max_iters + 1):
        Ap = op(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or not np.all(np.isfinite(Ap)):
            raise FloatingPointError("non-finite value inside conjugate gradient")
        if pAp <= 0.0:
            log.warning("CG met non-positive curvature %.3e at iteration %d", pAp, it)
            break
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = float(r @ r)
        result.x = x
        result.iterations = it
        result.residual_norms.append(np.sqrt(rr_new))
        # Ax = b - r along the recursion
        result.energies.append(0.5 * float(x @ (b - r)) - float(b @ x))
        if np.sqrt(rr_new) <= threshold:
            result.converged = True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return result


@dataclass(frozen=True)
class LineSearchConfig:
    tau_armijo: float = 0.1
    backtrack_factor: float = 0.5
    max_backtracks: int = 20

    def __post_init__(self):
        if not 0.0 < self.tau_armijo < 1.0:
            raise ValueError("tau_armijo must lie in (0, 1)")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be non-negative")


def feasible_line_search(
    eval_L: Callable[[np.ndarray], float],
    eval_D: Callable[[np.ndarray], float],
    theta: np.ndarray,
    direction: np.ndarray,
    g: np.ndarray,
    delta: float,
    config: LineSearchConfig = LineSearchConfig(),
    alpha0: float = 1.0,
) -> float:
    """Largest ``alpha0 * backtrack_factor**j`` meeting both step conditions.

    Conditions: ``L(theta + a d) >= L(theta) + tau * a * d'g`` and
    ``D(theta + a d) <= delta``. Returns 0.0 when every tried step fails.
    """
    slope = float(direction @ g)
    if not np.isfinite(slope):
        raise FloatingPointError("non-finite directional derivative")
    if slope <= 0.0:
        return 0.0
    L0 = eval_L(theta)
    if not np.isfinite(L0):
        raise FloatingPointError("non-finite objective at the base point")
    alpha = float(alpha0)
    for _ in range(config.max_backtracks + 1):
        cand = theta + alpha * direction
        D = eval_D(cand)
        if np.isfinite(D) and D <= delta:
            L = eval_L(cand)
            if np.isfinite(L) and L >= L0 + config.tau_armijo * alpha * slope:
                return alpha
        alpha *= config.backtrack_factor
    return 0.0


def _box_bounds(center: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Bounds whose float distance from ``center`` never exceeds ``radius``."""
    lo, hi = center - radius, center + radius
    while np.any(over := hi - center > radius):
        hi = np.where(over, np.nextafter(hi, -np.inf), hi)
    while np.any(over := center - lo > radius):
        lo = np.where(over, np.nextafter(lo, np.inf), lo)
    return lo, hi


def projected_gradient_box(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    center: np.ndarray,
    radius_inf: float,
    init: np.ndarray | None = None,
    steps: int = 50,
    step_size: float = 1.0,
    accept: Callable[[np.ndarray], bool] | None = None,
) -> np.ndarray:
    """Maximise ``objective`` over ``{x : ||x - center||_inf <= radius_inf}``.

    ``objective`` returns ``(value, gradient)``. Each iteration backtracks on
    the step size until the projected step does not decrease the objective,
    so the objective is nondecreasing along the iterates. ``accept`` is an
    optional extra feasibility predicate on candidate points.
    """
    if radius_inf < 0.0:
        raise ValueError("radius_inf must be non-negative")
    center = np.asarray(center, dtype=float)
    lo, hi = _box_bounds(center, radius_inf)
    x = np.clip(center if init is None else np.asarray(init, dtype=float), lo, hi)
    if radius_inf == 0.0:
        return x
    f, grad = objective(x)
    t = step_size
    for _ in range(steps):
        improved = False
        for _ in range(40):
            cand = np.clip(x + t * grad, lo, hi)
            if np.array_equal(cand, x):
                break
            f_new, g_new = objective(cand)
            if np.isfinite(f_new) and f_new >= f and (accept is None or accept(cand)):
                x, f, grad = cand, f_new, g_new
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        t *= 2.0
    return x


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``f`` by central differences, step ``rel_step * (1 + |x_i|)``."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * (1.0 + abs(x.flat[i]))
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        grad.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
