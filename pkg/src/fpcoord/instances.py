"""Seeded synthetic networks, including the four-subsystem benchmark.

Nothing here is random unless a ``numpy.random.Generator`` or a seed is
passed in, so equal seeds give equal instances.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import block_diag

from .fp_engine import spectral_radius
from .network import EdgeSpec, NetworkTopology, build_routing_matrix
from .subsystem import LinearSubsystem, LocalCost, build_condensed

__all__ = [
    "Benchmark",
    "random_topology",
    "random_stable_matrix",
    "random_linear_subsystem",
    "random_network",
    "scale_coupling",
    "tune_coupling",
    "four_subsystem_benchmark",
    "BENCHMARK_EDGES",
    "interconnection_matrix",
    "physical_radius",
]


def _rng(rng_or_seed) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return np.random.default_rng(rng_or_seed)


def random_topology(rng, n_max=6, dim_max=3, horizon_max=5, edge_prob=0.5) -> NetworkTopology:
    rng = _rng(rng)
    n = int(rng.integers(1, n_max + 1))
    edges = [
        EdgeSpec(s, t, int(rng.integers(1, dim_max + 1)))
        for s in range(n)
        for t in range(n)
        if s != t and rng.random() < edge_prob
    ]
    controlled = [s for s in range(n) if rng.random() < 0.5]
    return NetworkTopology(n, edges, controlled, int(rng.integers(1, horizon_max + 1)))


def random_stable_matrix(rng, n: int, rho: float = 0.8) -> np.ndarray:
    rng = _rng(rng)
    A = rng.standard_normal((n, n))
    r = spectral_radius(A)
    return A * (rho / r) if r > 0 else A


def random_linear_subsystem(
    rng,
    topology: NetworkTopology,
    s: int,
    state_dim: Optional[int] = None,
    input_dim: Optional[int] = None,
    output_dim: Optional[int] = None,
    feedthrough: bool = False,
    cost: Optional[LocalCost] = None,
) -> LinearSubsystem:
    """Random stable subsystem fitting slot ``s`` of ``topology``."""
    rng = _rng(rng)
    n = state_dim or int(rng.integers(1, 5))
    controlled = topology.is_controlled(s)
    m = (input_dim or int(rng.integers(1, 3))) if controlled else 0
    ny = output_dim or int(rng.integers(1, 3))
    q = sum(topology.in_dims(s))
    p = sum(topology.out_dims(s))
    A = random_stable_matrix(rng, n, rho=float(rng.uniform(0.3, 0.9)))
    sub = LinearSubsystem(
        A=A,
        B=rng.standard_normal((n, m)),
        E=rng.standard_normal((n, q)),
        C_v=rng.standard_normal((p, n)),
        C_y=rng.standard_normal((ny, n)),
        D_v=0.3 * rng.standard_normal((p, q)) if feedthrough else None,
        horizon=topology.horizon,
        in_dims=topology.in_dims(s),
        out_dims=topology.out_dims(s),
        mpc_Q=np.eye(ny),
        mpc_R=float(rng.uniform(0.1, 1.0)) * np.eye(m) if m else None,
        cost=cost
        or LocalCost(
            Wy=np.eye(ny),
            Wu=0.1 if m else None,
            Wv=0.05,
            Wr=0.5 if m else None,
        ),
    )
    return sub


def random_network(rng, topology: Optional[NetworkTopology] = None, feedthrough=False, **kw):
    rng = _rng(rng)
    topology = topology or random_topology(rng, **kw)
    subs = [
        random_linear_subsystem(rng, topology, s, feedthrough=feedthrough)
        for s in range(topology.n_subsystems)
    ]
    return topology, subs


def scale_coupling(subsystems: Sequence[LinearSubsystem], factor: float) -> list:
    """Scale every coupling-input channel; the condensed ``M_v`` scales linearly."""
    out = []
    for sub in subsystems:
        out.append(
            replace(
                sub,
                E=factor * sub.E,
                D_v=factor * sub.D_v,
                K_x=None if sub.controlled else sub.K_x,
                K_r=None if sub.controlled else sub.K_r,
                K_v=None if sub.controlled else sub.K_v,
            )
        )
    return out


def tune_coupling(topology, subsystems, target_rho: float) -> list:
    """Rescale couplings so that ``rho(M_v) == target_rho``.

    Subsystems with explicit (non-MPC) gains are not supported here since
    their ``K_v`` would not follow the rescaling.
    """
    rho = spectral_radius(build_condensed(topology, subsystems).M_v)
    if rho == 0:
        return list(subsystems)
    return scale_coupling(subsystems, target_rho / rho)


# four-subsystem benchmark ---------------------------------------------------

# S1..S4 are indices 0..3. S1 and S4 are controlled (u1 in R^2, u4 in R),
# S2 and S3 are driven only by their neighbours.
BENCHMARK_EDGES = (
    EdgeSpec(0, 1, 2),
    EdgeSpec(1, 0, 1),
    EdgeSpec(1, 2, 1),
    EdgeSpec(2, 1, 1),
    EdgeSpec(2, 3, 2),
    EdgeSpec(3, 2, 1),
    EdgeSpec(3, 0, 1),
)
BENCHMARK_STATE_DIMS = (4, 2, 2, 3)  # S1 carries the constant disturbance w1 as its last state
BENCHMARK_INPUT_DIMS = (2, 0, 0, 1)
BENCHMARK_OUTPUT_DIMS = (2, 1, 1, 2)


@dataclass
class Benchmark:
    topology: NetworkTopology
    subsystems: list
    x0: list
    disturbance: float
    seed: int
    target_rho: float
    tracked: dict  # subsystem -> boolean mask of tracked outputs

    @property
    def M_v(self) -> np.ndarray:
        return build_condensed(self.topology, self.subsystems).M_v

    def detuned(self, factor: float = 10.0, subsystem: int = 0) -> "Benchmark":
        """Scale the local MPC output weight of one subsystem, gains redesigned."""
        subs = list(self.subsystems)
        sub = subs[subsystem]
        subs[subsystem] = sub.with_gains(factor * np.asarray(sub.mpc_Q), sub.mpc_R)
        return replace(self, subsystems=subs)


def _normalise_input_gain(sub: LinearSubsystem, hess_max: float) -> LinearSubsystem:
    """Rescale ``B`` so the tracking Hessian ``2 Y_u^T W_y Y_u`` peaks at ``hess_max``."""
    if not sub.controlled:
        return sub
    Wy = np.kron(np.eye(sub.horizon), sub.cost.Wy)
    lam = 2 * np.linalg.eigvalsh(sub.Y_u.T @ Wy @ sub.Y_u).max()
    if lam <= 0:
        return sub
    return replace(sub, B=sub.B * np.sqrt(hess_max / lam), K_x=None, K_r=None, K_v=None)


def interconnection_matrix(topology: NetworkTopology, subsystems) -> np.ndarray:
    """One-step state matrix of the physically interconnected network (u = 0).

    Solves the instantaneous loop ``v = R (C_v x + D_v v)`` with the one-step
    routing ``R``, so ``x+ = (A + E (I - R D_v)^-1 R C_v) x``.
    """
    one = NetworkTopology(topology.n_subsystems, topology.edges, topology.controlled, 1)
    R = build_routing_matrix(one).matrix.astype(float)
    A = block_diag(*[s.A for s in subsystems])
    if not one.dim:
        return A
    E = block_diag(*[s.E for s in subsystems])
    C = block_diag(*[s.C_v for s in subsystems])
    D = block_diag(*[s.D_v for s in subsystems])
    return A + E @ np.linalg.solve(np.eye(one.dim) - R @ D, R @ C)


def _benchmark_candidate(rng, topology, horizon, mpc_R, increment_weight, hess_max, target_rho):
    subs = []
    for s in range(4):
        n, m, ny = BENCHMARK_STATE_DIMS[s], BENCHMARK_INPUT_DIMS[s], BENCHMARK_OUTPUT_DIMS[s]
        q, p = sum(topology.in_dims(s)), sum(topology.out_dims(s))
        n_phys = n - 1 if s == 0 else n
        A = np.zeros((n, n))
        A[:n_phys, :n_phys] = random_stable_matrix(rng, n_phys, rho=float(rng.uniform(0.2, 0.5)))
        B = np.zeros((n, m))
        B[:n_phys] = rng.standard_normal((n_phys, m))
        E = np.zeros((n, q))
        E[:n_phys] = rng.standard_normal((n_phys, q))
        C_v = np.zeros((p, n))
        C_v[:, :n_phys] = rng.standard_normal((p, n_phys))
        C_y = np.zeros((ny, n))
        C_y[:, :n_phys] = rng.standard_normal((ny, n_phys))
        if s == 0:
            A[n - 1, n - 1] = 1.0  # w1 held constant over the prediction
            A[:n_phys, n - 1] = rng.standard_normal(n_phys)
        if m:
            # S4 has one input for two outputs: only its first output is tracked
            Wy = np.eye(ny) if m >= ny else np.diag([1.0] + [0.0] * (ny - 1))
            cost = LocalCost(Wy=Wy, Wdu=increment_weight, Wv=0.0, Wr=0.0)
            mpcQ = Wy.copy()
        else:
            cost = LocalCost(Wy=0.0, Wv=0.01)
            mpcQ = None
        subs.append(
            LinearSubsystem(
                A=A, B=B, E=E, C_v=C_v, C_y=C_y, horizon=horizon,
                in_dims=topology.in_dims(s), out_dims=topology.out_dims(s),
                mpc_Q=mpcQ, mpc_R=mpc_R * np.eye(m) if m else None, cost=cost,
            )
        )
    subs = [_normalise_input_gain(sub, hess_max) for sub in subs]
    return tune_coupling(topology, subs, target_rho)


def physical_radius(topology: NetworkTopology, subsystems) -> float:
    """Spectral radius of the interconnected plant, disturbance states excluded.

    The benchmark's S1 carries ``w1`` as its last state; it is dropped here.
    """
    A = interconnection_matrix(topology, subsystems)
    keep = np.ones(A.shape[0], dtype=bool)
    keep[BENCHMARK_STATE_DIMS[0] - 1] = False
    return spectral_radius(A[np.ix_(keep, keep)])


def four_subsystem_benchmark(
    seed: int = 0,
    horizon: int = 10,
    target_rho: float = 0.9,
    disturbance: float = 0.5,
    mpc_R: float = 0.1,
    increment_weight: float = 0.3,
    hess_max: float = 8.0,
    max_physical_rho: Optional[float] = 0.95,
    max_draws: int = 500,
) -> Benchmark:
    """Synthetic instance with the four-subsystem signal dimensions.

    Every subsystem is open-loop stable and ``M_v`` is scaled to spectral
    radius ``target_rho``. Candidates are drawn from the seeded generator
    until the physically interconnected plant is also stable
    (radius <= ``max_physical_rho``), so a closed loop makes sense; pass
    ``None`` to keep the first draw. The input
    matrices are normalised so that a gradient step of 0.1 on each
    controlled subsystem's cost is a contraction.
    """
    rng = np.random.default_rng(seed)
    topology = NetworkTopology(4, BENCHMARK_EDGES, controlled=(0, 3), horizon=horizon)
    for _ in range(max_draws):
        subs = _benchmark_candidate(
            rng, topology, horizon, mpc_R, increment_weight, hess_max, target_rho
        )
        if max_physical_rho is None or physical_radius(topology, subs) <= max_physical_rho:
            break
    else:
        raise ValueError(
            f"no candidate with physical radius <= {max_physical_rho} in {max_draws} draws"
        )
    x0 = [np.zeros(n) for n in BENCHMARK_STATE_DIMS]
    x0[0][-1] = disturbance
    tracked = {s: np.diag(subs[s].cost.Wy) > 0 for s in (0, 3)}
    return Benchmark(topology, subs, x0, disturbance, seed, target_rho, tracked)
