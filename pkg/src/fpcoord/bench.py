"""Experiment harness: beta sweep, memory sweep, filter/AA race, closed loop.

Every experiment takes a :class:`Scenario` and returns a list of CSV rows
(header first); :func:`write_csv` serialises them. Floats are written with
``repr`` so equal scenarios give byte-identical files.

Experiment keys read from ``[experiment]``:

beta-sweep
    ``betas`` (default 0.1..1.0 step 0.1), ``setpoints``
memory-sweep
    ``memory`` (default [1, 3, 5, 10, 15]), ``setpoints``
race
    ``m`` (15), ``pi_Q`` (1.0), ``pi_R`` (1e-4), ``variant`` ("nominal" or
    "detuned"), ``detune_factor`` (10.0), ``detune_subsystem`` (0), ``setpoints``
closed-loop
    ``steps`` (40), ``step_time`` (5), ``m`` (15), ``learning_rate`` (0.1),
    ``setpoints`` (targets after the step; zero before)

``setpoints`` is a list with one entry per subsystem (empty for uncontrolled
ones). ``sigma_max`` and ``eps_max`` may also be given in ``[experiment]``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import block_diag

from .config import ConfigError, parse_network
from .coordinator import CoordinatorProblem, Mode, optimize_decision, solve_coherence
from .fp_engine import (
    Anderson,
    MatrixFilter,
    Plain,
    ScalarMix,
    certify_scalar_mix,
    design_pi_filter,
)
from .instances import four_subsystem_benchmark
from .network import NetworkTopology, build_routing_matrix
from .subsystem import build_condensed

__all__ = [
    "EXPERIMENTS",
    "Scenario",
    "scenario_from_config",
    "run_beta_sweep",
    "run_memory_sweep",
    "run_filter_vs_aa",
    "run_closed_loop",
    "run_scenario",
    "write_csv",
    "summarize",
]

EXPERIMENTS = ("beta-sweep", "memory-sweep", "race", "closed-loop")

# Pi design weights Q = pi_Q I, R = pi_R I. A small R keeps the filter
# contracting fast even when I - M_v is badly conditioned.
PI_Q_DEFAULT = 1.0
PI_R_DEFAULT = 1e-4

# S1 and S4 of the benchmark; the second output of S4 is not tracked
BENCHMARK_SETPOINTS = [[1.0, -0.5], [], [], [0.7, 0.0]]


@dataclass
class Scenario:
    experiment: str
    topology: NetworkTopology
    subsystems: list
    x0: list
    params: dict = field(default_factory=dict)
    seed: int = 0
    sigma_max: int = 500
    eps_max: float = 1e-8
    out: Optional[str] = None
    tracked: Optional[dict] = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(
                f"unknown experiment {self.experiment!r}; expected one of {', '.join(EXPERIMENTS)}"
            )
        if self.params.get("variant", "nominal") not in ("nominal", "detuned"):
            raise ValueError(f"variant must be 'nominal' or 'detuned', got {self.params['variant']!r}")
        self.setpoints()  # validate early

    def setpoints(self) -> list:
        sp = self.params.get("setpoints")
        if sp is None:
            sp = BENCHMARK_SETPOINTS if self.tracked is not None else None
        if sp is None:
            sp = [[1.0] * s.setpoint_dim for s in self.subsystems]
        sp = [np.asarray(v, dtype=float).reshape(-1) for v in sp]
        if len(sp) != self.topology.n_subsystems:
            raise ValueError("setpoints needs one entry per subsystem")
        for s, sub in enumerate(self.subsystems):
            want = sub.setpoint_dim if sub.controlled else 0
            if sp[s].size != want:
                raise ValueError(f"setpoints[{s}] has {sp[s].size} values, expected {want}")
        return sp

    def stacked_setpoints(self) -> np.ndarray:
        sp = self.setpoints()
        parts = [sp[s] for s in sorted(self.topology.controlled)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def problem(self, strategy, subsystems=None, decision=None, mode=Mode.SET_POINT):
        return CoordinatorProblem(
            self.topology,
            self.subsystems if subsystems is None else subsystems,
            self.x0,
            self.stacked_setpoints() if decision is None else decision,
            mode=mode,
            strategy=strategy,
            sigma_max=self.sigma_max,
            eps_max=self.eps_max,
        )


def scenario_from_config(
    cfg: dict,
    experiment: Optional[str] = None,
    seed: Optional[int] = None,
    sigma_max: Optional[int] = None,
    eps_max: Optional[float] = None,
    out: Optional[str] = None,
) -> Scenario:
    """Build a scenario; explicit arguments override config values."""
    path = cfg.get("_path", "<config>")
    exp = dict(cfg.get("experiment", {}))
    kind = experiment or exp.get("kind")
    if kind is None:
        raise ConfigError(path, "[experiment].kind is not set and no subcommand given")
    if exp.get("kind") not in (None, kind):
        raise ConfigError(path, f"config is for experiment {exp['kind']!r}, not {kind!r}")
    bench = dict(cfg.get("benchmark", {}))
    if seed is None:
        seed = int(exp.get("seed", bench.get("seed", 0)))
    tracked = None
    if "network" in cfg:
        topology, subs, x0 = parse_network(cfg, path)
    else:
        try:
            b = four_subsystem_benchmark(
                seed=seed,
                horizon=int(bench.get("horizon", 10)),
                target_rho=float(bench.get("target_rho", 0.9)),
                disturbance=float(bench.get("disturbance", 0.5)),
                max_physical_rho=0.95 if bench.get("require_stable_plant", True) else None,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(path, f"[benchmark]: {exc}") from None
        topology, subs, x0, tracked = b.topology, b.subsystems, b.x0, b.tracked
    try:
        return Scenario(
            experiment=kind,
            topology=topology,
            subsystems=subs,
            x0=x0,
            params=exp,
            seed=seed,
            sigma_max=int(sigma_max if sigma_max is not None else exp.get("sigma_max", 500)),
            eps_max=float(eps_max if eps_max is not None else exp.get("eps_max", 1e-8)),
            out=out or exp.get("out"),
            tracked=tracked,
        )
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if x is None:
        return ""
    return str(x)


def write_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


# experiments -----------------------------------------------------------------


def run_beta_sweep(sc: Scenario) -> list:
    """Certificate and actual run for each beta.

    Columns: beta, spectral_radius, converged, iterations, consistent.
    ``consistent`` is false when the certificate and the run disagree.
    """
    betas = sc.params.get("betas", [round(0.1 * i, 1) for i in range(1, 11)])
    M_v = build_condensed(sc.topology, sc.subsystems).M_v
    rows = [("beta", "spectral_radius", "converged", "iterations", "consistent")]
    for beta in betas:
        beta = float(beta)
        rho, certified = certify_scalar_mix(M_v, beta)
        _, rep = solve_coherence(sc.problem(ScalarMix(beta)))
        rows.append((beta, rho, rep.converged, rep.iterations, certified == rep.converged))
    return rows


def run_memory_sweep(sc: Scenario) -> list:
    """One Anderson solve per memory cap, all from ``v0 = 0``.

    Columns: m, iterations_to_tol, final_eps, status. ``iterations_to_tol``
    is empty when the tolerance was not reached.
    """
    memory = sc.params.get("memory", [1, 3, 5, 10, 15])
    rows = [("m", "iterations_to_tol", "final_eps", "status")]
    for m in memory:
        _, rep = solve_coherence(sc.problem(Anderson(int(m))))
        rows.append(
            (int(m), rep.iterations if rep.converged else None, rep.final_eps, rep.termination.value)
        )
    return rows


def run_filter_vs_aa(sc: Scenario) -> list:
    """Per-iteration eps of the Pi filter, Anderson and plain iteration.

    ``Pi`` is designed on the nominal network. The detuned variant then
    rescales the local MPC output weight of one subsystem (gains redesigned)
    while keeping ``Pi``.

    Columns: iteration, eps_filter, eps_aa, eps_plain.
    """
    p = sc.params
    D = sc.topology.dim
    M_v = build_condensed(sc.topology, sc.subsystems).M_v
    Pi = design_pi_filter(
        M_v,
        float(p.get("pi_Q", PI_Q_DEFAULT)) * np.eye(D),
        float(p.get("pi_R", PI_R_DEFAULT)) * np.eye(D),
    )
    subs = list(sc.subsystems)
    if p.get("variant", "nominal") == "detuned":
        s = int(p.get("detune_subsystem", 0))
        factor = float(p.get("detune_factor", 10.0))
        sub = subs[s]
        Q = np.eye(sub.output_dim) if sub.mpc_Q is None else np.asarray(sub.mpc_Q, dtype=float)
        subs[s] = sub.with_gains(factor * Q, sub.mpc_R)
    reports = [
        solve_coherence(sc.problem(strategy, subsystems=subs))[1]
        for strategy in (MatrixFilter(Pi), Anderson(int(p.get("m", 15))), Plain())
    ]
    n = max(r.iterations for r in reports)
    rows = [("iteration", "eps_filter", "eps_aa", "eps_plain")]
    for i in range(n):
        rows.append((i + 1, *(r.trace[i].eps if i < r.iterations else None for r in reports)))
    return rows


def _per_step_routing(topology: NetworkTopology):
    one = NetworkTopology(topology.n_subsystems, topology.edges, topology.controlled, 1)
    return one, build_routing_matrix(one).matrix.astype(float)


def _actual_couplings(topology, subsystems, x):
    """Per-subsystem incoming coupling values at the current instant.

    Solves ``v = R (C_v x + D_v v)`` so direct feedthrough loops are exact.
    """
    one, R = _per_step_routing(topology)
    if not one.dim:
        return [np.zeros(0) for _ in subsystems]
    Cx = np.concatenate([sub.C_v @ x[s] for s, sub in enumerate(subsystems)])
    Dv = block_diag(*[sub.D_v for sub in subsystems])
    v_in = np.linalg.solve(np.eye(one.dim) - R @ Dv, R @ Cx)
    return [v_in[one.subsystem_slice(s, "incoming")] for s in range(topology.n_subsystems)]


def _shift_profile(vec: np.ndarray, dims, horizon: int) -> np.ndarray:
    """Advance a stacked edge-major profile by one step, repeating the last sample."""
    out, start = [], 0
    for d in dims:
        block = vec[start:start + horizon * d].reshape(horizon, d)
        out.append(np.vstack([block[1:], block[-1:]]).ravel())
        start += horizon * d
    return np.concatenate(out) if out else np.zeros(0)


def run_closed_loop(sc: Scenario) -> list:
    """Receding-horizon simulation under control-profile coordination.

    At every period the coordinator solves the joint fixed point on the
    control and coupling profiles from the measured state, the first control
    sample of each controlled subsystem is applied, and the plant advances
    with the coupling values its neighbours actually emit. The set-point
    targets switch from zero to ``setpoints`` at ``step_time``.

    Columns: time, y{s}_{i} (absolute outputs), r{s}_{i} (set-points), J_c, status.
    """
    p = sc.params
    steps = int(p.get("steps", 40))
    step_time = int(p.get("step_time", 5))
    lr = float(p.get("learning_rate", 0.1))
    m = int(p.get("m", 15))
    top, subs = sc.topology, list(sc.subsystems)
    N = top.horizon
    ctr = sorted(top.controlled)
    targets = sc.setpoints()
    x = [np.array(v, dtype=float) for v in sc.x0]
    u_prev = {s: np.zeros(subs[s].input_dim) for s in ctr}
    u_warm = np.zeros(sum(subs[s].u_dim for s in ctr))
    v_warm = np.zeros(top.dim)

    header = ["time"]
    for s, sub in enumerate(subs):
        header += [f"y{s}_{i}" for i in range(sub.output_dim)]
    for s in ctr:
        header += [f"r{s}_{i}" for i in range(subs[s].output_dim)]
    header += ["J_c", "status"]
    rows = [tuple(header)]

    for k in range(steps):
        active = k >= step_time
        local = list(subs)
        for s in ctr:
            tgt = targets[s] if active else np.zeros(subs[s].output_dim)
            local[s] = replace(subs[s], cost=replace(subs[s].cost, y_target=tgt, u_prev=u_prev[s]))
        problem = CoordinatorProblem(
            top, local, x, u_warm, mode=Mode.CONTROL_PROFILE, strategy=Anderson(m),
            sigma_max=sc.sigma_max, eps_max=sc.eps_max,
        )
        res = optimize_decision(problem, learning_rate=lr, v0=v_warm)

        row = [k]
        for s, sub in enumerate(local):
            row += list(sub.C_y @ (sub.x_op + x[s]))
        for s in ctr:
            row += list(local[s].cost.y_target + local[s].C_y @ local[s].x_op)
        row += [res.cost, res.status]
        rows.append(tuple(row))

        slices = problem.decision_slices()
        applied = {s: res.decision[slices[s]][: subs[s].input_dim] for s in ctr}
        v_now = _actual_couplings(top, local, x)
        x = [
            sub.A @ x[s] + sub.B @ applied.get(s, np.zeros(0)) + sub.E @ v_now[s]
            for s, sub in enumerate(local)
        ]
        u_prev = applied
        u_warm = np.concatenate(
            [_shift_profile(res.decision[slices[s]], [subs[s].input_dim], N) for s in ctr]
        ) if ctr else np.zeros(0)
        v_warm = np.concatenate(
            [_shift_profile(res.v_in[top.subsystem_slice(s, "incoming")], top.in_dims(s), N)
             for s in range(top.n_subsystems)]
        )
    return rows


def tracking_error(rows, tracked: dict, window: int = 1) -> float:
    """Max |y - r| over tracked outputs in the last ``window`` rows."""
    header = rows[0]
    col = {name: i for i, name in enumerate(header)}
    worst = 0.0
    for row in rows[-window:]:
        for s, mask in tracked.items():
            for i, on in enumerate(mask):
                if on:
                    worst = max(worst, abs(row[col[f"y{s}_{i}"]] - row[col[f"r{s}_{i}"]]))
    return worst


RUNNERS = {
    "beta-sweep": run_beta_sweep,
    "memory-sweep": run_memory_sweep,
    "race": run_filter_vs_aa,
    "closed-loop": run_closed_loop,
}


def run_scenario(sc: Scenario) -> list:
    return RUNNERS[sc.experiment](sc)


def summarize(sc: Scenario, rows) -> str:
    """Short human-readable table describing the run."""
    lines = [f"experiment: {sc.experiment}   seed: {sc.seed}   D: {sc.topology.dim}"]
    header = rows[0]
    body = rows[1:]
    if sc.experiment == "race":
        for j, name in enumerate(header[1:], start=1):
            vals = [r[j] for r in body if r[j] is not None]
            lines.append(f"  {name:<10} iterations={len(vals):<5d} final_eps={vals[-1]:.3e}" if vals else f"  {name}: no iterations")
    elif sc.experiment == "closed-loop":
        statuses = [r[-1] for r in body]
        lines.append(f"  periods={len(body)}  incomplete={statuses.count('Incomplete')}  final J_c={body[-1][-2]:.6g}" if body else "  periods=0")
        if sc.tracked and body:
            lines.append(f"  final tracking error={tracking_error(rows, sc.tracked):.3e}")
    else:
        widths = [max(len(str(h)), 12) for h in header]
        lines.append("  " + "  ".join(f"{h:>{w}}" for h, w in zip(header, widths)))
        for r in body:
            lines.append("  " + "  ".join(f"{_short(v):>{w}}" for v, w in zip(r, widths)))
    return "\n".join(lines)


def _short(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{v:.4g}"
    return _fmt(v)
