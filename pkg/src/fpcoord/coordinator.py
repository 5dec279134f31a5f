"""Upper-layer coordinator.

The coordinator only talks to subsystems through ``respond``; it never reads
model matrices. One round of the black-box map ``G = G_in o g_out`` scatters
the presumed incoming profile, collects every subsystem's outgoing profile
and cost, and routes the result back into incoming order.

Two decision modes are supported. In set-point mode the decision is the
stacked set-point vector ``r`` of the controlled subsystems and each
subsystem runs its own control law; the coordinator wraps the coherence
solve in a derivative-free pattern search. In control-profile mode the
decision is the stacked control profile ``u`` and the coordinator iterates
jointly on ``(u, v_in)``.
"""
from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .fp_engine import Anderson, SolveReport, Termination, run_fixed_point
from .network import (
    CouplingProfile,
    Layout,
    NetworkTopology,
    build_routing_matrix,
    gather_outgoing,
    scatter_incoming,
)
from .subsystem import check_compatible

__all__ = [
    "Mode",
    "CoordinatorProblem",
    "CentralCostValue",
    "OptimizeResult",
    "SubsystemFailure",
    "coordinator_round",
    "solve_coherence",
    "optimize_decision",
    "central_cost",
]


class Mode(str, Enum):
    SET_POINT = "set-point"
    CONTROL_PROFILE = "control-profile"


class SubsystemFailure(RuntimeError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"subsystem {index} failed to respond: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True)
class CentralCostValue:
    total: float
    per_subsystem: tuple[float, ...]


@dataclass
class CoordinatorProblem:
    """Everything the coordinator needs for one control period.

    ``states`` are the measured state deviations, one per subsystem.
    ``decision`` is the stacked ``r`` (set-point mode) or ``u`` (control-profile
    mode) over controlled subsystems in index order.
    """

    topology: NetworkTopology
    subsystems: Sequence
    states: Sequence[np.ndarray]
    decision: np.ndarray
    mode: Mode = Mode.SET_POINT
    strategy: object = field(default_factory=lambda: Anderson(15))
    sigma_max: int = 500
    eps_max: float = 1e-8
    executor: Optional[Executor] = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        check_compatible(self.topology, self.subsystems)
        self.routing = build_routing_matrix(self.topology)
        self.states = [np.asarray(x, dtype=float).reshape(-1) for x in self.states]
        if len(self.states) != self.topology.n_subsystems:
            raise ValueError("one state vector per subsystem is required")
        self.decision = np.asarray(self.decision, dtype=float).reshape(-1)
        if self.decision.size != self.decision_dim:
            raise ValueError(
                f"decision has length {self.decision.size}, expected {self.decision_dim} "
                f"for {self.mode.value} mode"
            )

    @property
    def controlled(self) -> list[int]:
        return sorted(self.topology.controlled)

    def _block_dim(self, s: int) -> int:
        sub = self.subsystems[s]
        return sub.setpoint_dim if self.mode is Mode.SET_POINT else sub.u_dim

    @property
    def decision_dim(self) -> int:
        return sum(self._block_dim(s) for s in self.controlled)

    def decision_slices(self) -> dict[int, slice]:
        out, start = {}, 0
        for s in self.controlled:
            n = self._block_dim(s)
            out[s] = slice(start, start + n)
            start += n
        return out

    def with_decision(self, decision) -> "CoordinatorProblem":
        return replace(self, decision=np.asarray(decision, dtype=float))


def _respond_all(problem: CoordinatorProblem, v_parts, decision):
    slices = problem.decision_slices()
    key = "r" if problem.mode is Mode.SET_POINT else "u"

    def call(s):
        kwargs = {key: decision[slices[s]]} if s in slices else {}
        try:
            v_out, J = problem.subsystems[s].respond(problem.states[s], v_parts[s], **kwargs)
        except Exception as exc:  # noqa: BLE001
            raise SubsystemFailure(s, exc) from exc
        return np.asarray(v_out, dtype=float).reshape(-1), float(J)

    idx = range(problem.topology.n_subsystems)
    if problem.executor is None:
        return [call(s) for s in idx]
    return list(problem.executor.map(call, idx))


def coordinator_round(problem: CoordinatorProblem, v_in, decision=None):
    """One evaluation of ``G``: returns the routed profile and the central cost."""
    if not isinstance(v_in, CouplingProfile):
        v_in = CouplingProfile(v_in, Layout.INCOMING)
    decision = problem.decision if decision is None else np.asarray(decision, dtype=float)
    parts = scatter_incoming(v_in, problem.topology)
    results = _respond_all(problem, parts, decision)
    v_out = gather_outgoing([r[0] for r in results], problem.topology)
    v_hat = CouplingProfile(problem.routing.apply(v_out.data), Layout.INCOMING)
    costs = tuple(r[1] for r in results)
    return v_hat, CentralCostValue(total=float(sum(costs)), per_subsystem=costs)


def central_cost(problem: CoordinatorProblem, v_in, decision=None) -> CentralCostValue:
    return coordinator_round(problem, v_in, decision)[1]


def solve_coherence(problem: CoordinatorProblem, v0=None, decision=None):
    """Solve ``v_in = G_in g_out(decision, v_in)`` with the problem's strategy.

    Non-converged runs are returned as-is; inspect ``report.termination``.
    """
    D = problem.topology.dim
    v0 = np.zeros(D) if v0 is None else np.asarray(v0, dtype=float)

    def G(v):
        return coordinator_round(problem, v, decision)[0].data

    report = run_fixed_point(G, problem.strategy, v0, problem.sigma_max, problem.eps_max)
    return CouplingProfile(report.profile, Layout.INCOMING), report


@dataclass
class OptimizeResult:
    decision: np.ndarray
    cost: float
    v_in: np.ndarray
    history: list
    complete: bool
    evaluations: int
    report: Optional[SolveReport] = None

    @property
    def status(self) -> str:
        return "Complete" if self.complete else "Incomplete"


def optimize_decision(
    problem: CoordinatorProblem,
    *,
    scale: Optional[float] = None,
    min_step: float = 1e-4,
    max_evaluations: int = 2000,
    learning_rate: float = 0.1,
    fd_step: float = 1e-6,
    v0=None,
) -> OptimizeResult:
    """Minimise the central cost over the decision vector.

    Set-point mode: coordinate pattern search with step halving. The initial
    step is 10% of ``scale`` (default ``max(1, |r0|_inf)``); the search stops
    when the step drops below ``min_step``. Every poll solves the coherence
    constraint, warm-started from the last accepted profile; polls whose
    solve does not converge are rejected.

    Control-profile mode: fixed-point iteration on ``z = (u, v_in)`` with

        u <- u - learning_rate * grad_u J_c(u, v_in)
        v_in <- G(u, v_in)

    where the gradient is a central finite difference (step ``fd_step``
    relative) through ``respond`` calls, holding ``v_in`` fixed. The
    problem's strategy, ``sigma_max`` and ``eps_max`` govern the iteration.
    """
    if problem.mode is Mode.SET_POINT:
        return _pattern_search(problem, scale, min_step, max_evaluations, v0)
    return _joint_iteration(problem, learning_rate, fd_step, v0)


def _pattern_search(problem, scale, min_step, max_evaluations, v0):
    r = problem.decision.copy()
    if scale is None:
        scale = max(1.0, float(np.max(np.abs(r)))) if r.size else 1.0
    step = 0.1 * scale
    evaluations = 0

    def evaluate(r_try, v_start):
        nonlocal evaluations
        evaluations += 1
        v_star, report = solve_coherence(problem, v_start, decision=r_try)
        if not report.converged:
            return np.inf, v_start, report
        cost = central_cost(problem, v_star, r_try).total
        return cost, v_star.data, report

    best, v_best, report = evaluate(r, v0)
    if not np.isfinite(best):
        return OptimizeResult(r, best, v_best, [best], False, evaluations, report)
    history = [best]
    complete = True
    while step >= min_step and r.size:
        improved = False
        for i in range(r.size):
            for sign in (1.0, -1.0):
                if evaluations >= max_evaluations:
                    complete = False
                    break
                trial = r.copy()
                trial[i] += sign * step
                cost, v_trial, rep = evaluate(trial, v_best)
                if cost < best:
                    r, best, v_best, report = trial, cost, v_trial, rep
                    history.append(best)
                    improved = True
                    break
            if not complete:
                break
        if not complete:
            break
        if not improved:
            step *= 0.5
    return OptimizeResult(r, best, np.asarray(v_best), history, complete, evaluations, report)


def _fd_gradient(problem, u, v_parts, fd_step):
    grad = np.zeros_like(u)
    for s, sl in problem.decision_slices().items():
        sub, x, v_s = problem.subsystems[s], problem.states[s], v_parts[s]
        for i in range(sl.start, sl.stop):
            h = fd_step * max(1.0, abs(u[i]))
            up, dn = u[sl].copy(), u[sl].copy()
            up[i - sl.start] += h
            dn[i - sl.start] -= h
            J_up = sub.respond(x, v_s, u=up)[1]
            J_dn = sub.respond(x, v_s, u=dn)[1]
            grad[i] = (J_up - J_dn) / (2 * h)
    return grad


def _joint_iteration(problem, learning_rate, fd_step, v0):
    nu, D = problem.decision_dim, problem.topology.dim
    z0 = np.concatenate([problem.decision, np.zeros(D) if v0 is None else np.asarray(v0, float)])
    history = []
    evaluations = 0

    def G_ext(z):
        nonlocal evaluations
        u, v = z[:nu], z[nu:]
        v_hat, cost = coordinator_round(problem, v, u)
        parts = scatter_incoming(CouplingProfile(v, Layout.INCOMING), problem.topology)
        grad = _fd_gradient(problem, u, parts, fd_step)
        evaluations += 1
        history.append(cost.total)
        return np.concatenate([u - learning_rate * grad, v_hat.data])

    report = run_fixed_point(G_ext, problem.strategy, z0, problem.sigma_max, problem.eps_max)
    u, v = report.profile[:nu], report.profile[nu:]
    cost = central_cost(problem, v, u).total
    return OptimizeResult(
        decision=u,
        cost=cost,
        v_in=v,
        history=history,
        complete=report.termination is Termination.CONVERGED,
        evaluations=evaluations,
        report=report,
    )
