"""Fixed-point iteration engine for ``v = G(v)``.

Four update rules share one driver, :func:`run_fixed_point`:

* :class:`Plain` -- ``v <- G(v)``
* :class:`ScalarMix` -- ``v <- (1 - beta) v + beta G(v)``
* :class:`MatrixFilter` -- ``v <- (I - Pi) v + Pi G(v)``
* :class:`Anderson` -- Anderson acceleration with systematic restarts.

The module also carries the linear convergence tools used with the mixing
rules: spectral radius, the scalar-mix certificate and the Riccati design of
the matrix gain ``Pi``.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import solve_discrete_are

__all__ = [
    "Plain",
    "ScalarMix",
    "MatrixFilter",
    "Anderson",
    "AndersonState",
    "Termination",
    "TraceRecord",
    "SolveReport",
    "DesignError",
    "StrategyError",
    "residual",
    "step_scalar_mix",
    "step_matrix_filter",
    "step_anderson",
    "solve_gamma",
    "spectral_radius",
    "certify_scalar_mix",
    "solve_dare",
    "design_pi_filter",
    "run_fixed_point",
    "write_trace_csv",
    "DIVERGENCE_THRESHOLD",
]

DIVERGENCE_THRESHOLD = 1e12
RANK_RTOL = 1e-10


class StrategyError(RuntimeError):
    pass


class DesignError(RuntimeError):
    pass


# strategies -----------------------------------------------------------------


@dataclass(frozen=True)
class Plain:
    name = "plain"


@dataclass(frozen=True)
class ScalarMix:
    beta: float
    name = "scalar-mix"

    def __post_init__(self):
        if not np.isfinite(self.beta):
            raise ValueError("beta must be finite")


@dataclass(frozen=True, eq=False)
class MatrixFilter:
    Pi: np.ndarray
    name = "matrix-filter"

    def __post_init__(self):
        Pi = np.atleast_2d(np.asarray(self.Pi, dtype=float))
        if Pi.shape[0] != Pi.shape[1]:
            raise ValueError(f"Pi must be square, got {Pi.shape}")
        object.__setattr__(self, "Pi", Pi)


@dataclass(frozen=True)
class Anderson:
    m: int
    regularization: float = 0.0
    name = "anderson"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("memory cap m must be >= 1")
        if self.regularization < 0:
            raise ValueError("regularization must be non-negative")


Strategy = Union[Plain, ScalarMix, MatrixFilter, Anderson]


# single steps -----------------------------------------------------------------


def residual(G_eval: Callable[[np.ndarray], np.ndarray], v: np.ndarray):
    """Evaluate ``G`` once; return ``(G(v) - v, G(v))``."""
    v = np.asarray(v, dtype=float)
    Gv = np.asarray(G_eval(v), dtype=float).reshape(-1)
    if Gv.shape != v.shape:
        raise ValueError(f"G returned length {Gv.size}, expected {v.size}")
    return Gv - v, Gv


def step_scalar_mix(v, Gv, beta: float) -> np.ndarray:
    return (1.0 - beta) * np.asarray(v) + beta * np.asarray(Gv)


def step_matrix_filter(v, Gv, Pi) -> np.ndarray:
    v = np.asarray(v)
    return v - Pi @ v + Pi @ np.asarray(Gv)


def solve_gamma(dG: np.ndarray, g: np.ndarray, regularization: float = 0.0) -> np.ndarray:
    """Least-squares coefficients ``argmin |g - dG gamma|_2``.

    Rank-deficient ``dG`` gives the minimum-norm minimiser (SVD with relative
    cutoff ``RANK_RTOL``). A positive ``regularization`` switches to the
    ridge normal equations ``(dG^T dG + reg I) gamma = dG^T g``.
    """
    dG = np.asarray(dG, dtype=float)
    g = np.asarray(g, dtype=float)
    if dG.ndim == 1:
        dG = dG[:, None]
    k = dG.shape[1]
    if k == 0 or not np.any(dG):
        return np.zeros(k)
    if regularization > 0:
        return np.linalg.solve(dG.T @ dG + regularization * np.eye(k), dG.T @ g)
    gamma, *_ = np.linalg.lstsq(dG, g, rcond=RANK_RTOL)
    return gamma


@dataclass
class AndersonState:
    """Memory of Anderson acceleration with systematic restarts.

    ``c`` is the restart counter; the memory used at an iteration is
    ``m_sigma = min(m, c)`` most recent difference pairs. ``c`` runs
    ``0, 1, ..., m, 1, ..., m, 1, ...`` so that after a full cycle the
    least-squares problem drops back to a single column.
    """

    m: int
    regularization: float = 0.0
    c: int = 0
    m_sigma: int = 0
    dV: list = field(default_factory=list)
    dG: list = field(default_factory=list)
    prev_iterate: Optional[np.ndarray] = None
    prev_residual: Optional[np.ndarray] = None
    last_gamma: Optional[np.ndarray] = None

    def advance_counter(self) -> None:
        self.c = 1 if self.c == self.m else self.c + 1


def step_anderson(state: AndersonState, v, Gv, g):
    """One Anderson update; mutates and returns ``state``.

    ``state.m_sigma`` is set to the memory used by this step. The first call
    (empty memory) returns ``G(v)``.
    """
    v = np.asarray(v, dtype=float)
    g = np.asarray(g, dtype=float)
    state.m_sigma = min(state.m, state.c)
    if state.prev_residual is None:
        v_next = np.array(Gv, dtype=float)
        state.last_gamma = None
    else:
        state.dG.append(g - state.prev_residual)
        state.dV.append(v - state.prev_iterate)
        keep = max(state.m_sigma, 1)
        del state.dV[:-keep]
        del state.dG[:-keep]
        cols_v = np.column_stack(state.dV[-state.m_sigma:])
        cols_g = np.column_stack(state.dG[-state.m_sigma:])
        try:
            gamma = solve_gamma(cols_g, g, state.regularization)
        except np.linalg.LinAlgError as exc:
            raise StrategyError(
                f"Anderson least-squares failed with m_sigma={state.m_sigma}: {exc}"
            ) from exc
        state.last_gamma = gamma
        v_next = v + g - (cols_v + cols_g) @ gamma
    state.prev_iterate = v
    state.prev_residual = g
    state.advance_counter()
    return v_next, state


# spectral tools ----------------------------------------------------------------


def spectral_radius(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got {M.shape}")
    if M.size == 0:
        return 0.0
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def certify_scalar_mix(M_v, beta: float):
    """``rho(I - beta (I - M_v))`` and whether it is below one."""
    M_v = np.atleast_2d(np.asarray(M_v, dtype=float))
    n = M_v.shape[0]
    rho = spectral_radius(np.eye(n) - beta * (np.eye(n) - M_v))
    return rho, rho < 1.0


def solve_dare(A, B, Q, R, tol: float = 1e-10, max_iter: int = 100_000):
    """Stabilising DARE solution ``P`` and LQ gain ``K = (R + B'PB)^-1 B'PA``.

    Uses :func:`scipy.linalg.solve_discrete_are`; if that fails (e.g. a
    nearly singular symplectic pencil) falls back to Riccati value iteration
    from ``P = Q`` until the max-abs increment is at most ``tol``.
    """
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    try:
        P = solve_discrete_are(A, B, Q, R)
        if not np.all(np.isfinite(P)):
            raise ValueError("non-finite DARE solution")
    except (np.linalg.LinAlgError, ValueError):
        P = _dare_value_iteration(A, B, Q, R, tol, max_iter)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return P, K


def _dare_value_iteration(A, B, Q, R, tol, max_iter):
    P = np.array(Q, dtype=float)
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = A.T @ P @ A - A.T @ P @ B @ K + Q
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise DesignError("Riccati recursion diverged")
        if np.max(np.abs(P_next - P)) <= tol:
            return P_next
        P = P_next
    raise DesignError(f"Riccati recursion did not settle in {max_iter} iterations")


def design_pi_filter(M_v, Q=None, R=None, tol: float = 1e-10, max_iter: int = 100_000):
    """Matrix gain ``Pi`` with ``rho(I - Pi + Pi M_v) < 1``.

    Poses the LQ problem on ``x+ = x - (I - M_v) w`` with state feedback
    ``w = Pi x``; the closed loop ``I - (I - M_v) Pi`` shares its spectrum
    with ``I - Pi (I - M_v)``. The pair ``(I, I - M_v)`` is stabilisable iff
    ``I - M_v`` is invertible, i.e. ``M_v`` has no eigenvalue equal to one.
    """
    M_v = np.atleast_2d(np.asarray(M_v, dtype=float))
    n = M_v.shape[0]
    Q = np.eye(n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.eye(n) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    if n == 0:
        return np.zeros((0, 0))
    B = np.eye(n) - M_v
    sv = np.linalg.svd(B, compute_uv=False)
    if sv[-1] <= 1e-12 * max(1.0, sv[0]):
        raise DesignError(
            "pair (I, I - M_v) is not stabilisable: I - M_v is singular "
            "(M_v has an eigenvalue at 1)"
        )
    _, K = solve_dare(np.eye(n), B, Q, R, tol=tol, max_iter=max_iter)
    Pi = K
    rho = spectral_radius(np.eye(n) - Pi + Pi @ M_v)
    if not rho < 1.0:
        raise DesignError(f"designed filter is not contracting (rho = {rho:.6g})")
    return Pi


# driver ----------------------------------------------------------------------


class Termination(str, Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    DIVERGED = "Diverged"


@dataclass(frozen=True)
class TraceRecord:
    sigma: int
    eps: float
    residual_norm: float
    m_sigma: int
    gamma_norm: float
    wall_time: float


@dataclass
class SolveReport:
    strategy: str
    iterations: int
    trace: list
    termination: Termination
    profile: np.ndarray
    eps_max: float

    @property
    def converged(self) -> bool:
        return self.termination is Termination.CONVERGED

    @property
    def eps(self) -> np.ndarray:
        return np.array([t.eps for t in self.trace])

    @property
    def final_eps(self) -> float:
        return self.trace[-1].eps if self.trace else float("inf")


def run_fixed_point(
    G_eval: Callable[[np.ndarray], np.ndarray],
    strategy: Strategy,
    v0,
    sigma_max: int,
    eps_max: float,
) -> SolveReport:
    """Iterate ``strategy`` on ``G`` from ``v0``.

    Each iteration evaluates ``G`` once at the current iterate ``v``,
    forms the next iterate and records ``eps = max|v_next - v|``. The run is
    Converged when ``eps <= eps_max`` and the residual ``max|G(v) - v|`` is
    at most ``eps_max`` as well (the second test catches stalled updates
    such as ``beta = 0``). It stops as Diverged on non-finite values or
    ``eps > 1e12`` and as MaxIterations after ``sigma_max`` iterations.
    """
    if sigma_max < 1:
        raise ValueError("sigma_max must be >= 1")
    if not eps_max > 0:
        raise ValueError("eps_max must be positive")
    v = np.array(v0, dtype=float).reshape(-1)
    if isinstance(strategy, MatrixFilter) and strategy.Pi.shape[0] != v.size:
        raise ValueError(f"Pi is {strategy.Pi.shape[0]}-dimensional, profile is {v.size}")
    aa = AndersonState(strategy.m, strategy.regularization) if isinstance(strategy, Anderson) else None

    trace = []
    status = Termination.MAX_ITERATIONS
    t0 = time.perf_counter()
    for sigma in range(sigma_max):
        try:
            g, Gv = residual(G_eval, v)
        except FloatingPointError:
            status = Termination.DIVERGED
            break
        if not np.all(np.isfinite(Gv)):
            status = Termination.DIVERGED
            break

        m_sigma, gamma_norm = 0, float("nan")
        if isinstance(strategy, Plain):
            v_next = Gv
        elif isinstance(strategy, ScalarMix):
            v_next = step_scalar_mix(v, Gv, strategy.beta)
        elif isinstance(strategy, MatrixFilter):
            v_next = step_matrix_filter(v, Gv, strategy.Pi)
        elif isinstance(strategy, Anderson):
            v_next, aa = step_anderson(aa, v, Gv, g)
            m_sigma = aa.m_sigma
            if aa.last_gamma is not None:
                gamma_norm = float(np.linalg.norm(aa.last_gamma))
        else:
            raise TypeError(f"unknown strategy {strategy!r}")

        diff = np.abs(v_next - v)
        eps = float(np.max(diff)) if diff.size else 0.0
        res_inf = float(np.max(np.abs(g))) if g.size else 0.0
        trace.append(
            TraceRecord(
                sigma=sigma,
                eps=eps,
                residual_norm=float(np.linalg.norm(g)),
                m_sigma=m_sigma,
                gamma_norm=gamma_norm,
                wall_time=time.perf_counter() - t0,
            )
        )
        if not np.isfinite(eps) or eps > DIVERGENCE_THRESHOLD:
            status = Termination.DIVERGED
            break
        v = v_next
        if eps <= eps_max and res_inf <= eps_max:
            status = Termination.CONVERGED
            break

    return SolveReport(
        strategy=strategy.name,
        iterations=len(trace),
        trace=trace,
        termination=status,
        profile=v,
        eps_max=eps_max,
    )


TRACE_COLUMNS = ("sigma", "eps", "residual_norm", "m_sigma", "wall_time")


def write_trace_csv(report: SolveReport, path) -> None:
    """One row per iteration: sigma, eps, residual 2-norm, m_sigma, wall time."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for t in report.trace:
            w.writerow([t.sigma, repr(t.eps), repr(t.residual_norm), t.m_sigma, f"{t.wall_time:.6f}"])
