"""Local subsystems: linear response maps, local costs and condensed matrices.

All vectors exchanged here are deviations from the operating point. Control
profiles are time-major (``u(k)`` first). Coupling profiles use the
edge-major layout of :mod:`fpcoord.network`: one contiguous, time-major block
per edge, edges in canonical neighbour order.

The prediction convention is

    x(k+i+1) = A x(k+i) + B u(k+i) + E v_in(k+i)
    v_out(k+i) = C_v x(k+i) + D_v v_in(k+i)        i = 0..N-1
    y(k+i+1)  = C_y x(k+i+1)                       i = 0..N-1

so the outgoing profile covers the same window as the incoming one and the
tracked output profile starts one step ahead, where the first control move
has an effect.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import block_diag

from .network import Layout, NetworkTopology, build_routing_matrix

__all__ = [
    "LocalCost",
    "LinearSubsystem",
    "BlackBoxSubsystem",
    "CondensedModel",
    "ModeError",
    "control_profile",
    "respond",
    "build_condensed",
    "check_compatible",
    "edge_to_time_perm",
    "mpc_gains",
]


class ModeError(ValueError):
    """Raised when a subsystem is driven with the wrong kind of decision input."""


def _mat(a, shape=None) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float)) if a is not None else None
    if a is not None and shape is not None and a.size == 0:
        a = a.reshape(shape)
    return a


def _weight(w, n: int) -> np.ndarray:
    """Accept a scalar, a diagonal or a full matrix; return ``n x n``."""
    if w is None:
        return np.zeros((n, n))
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        return float(w) * np.eye(n)
    if w.ndim == 1:
        if w.size != n:
            raise ValueError(f"diagonal weight has length {w.size}, expected {n}")
        return np.diag(w)
    if w.shape != (n, n):
        raise ValueError(f"weight has shape {w.shape}, expected {(n, n)}")
    return w


def edge_to_time_perm(dims: Sequence[int], horizon: int) -> np.ndarray:
    """Index array ``p`` such that ``time_major = edge_major[p]``.

    Edge-major stacks each edge's full profile; time-major stacks, for each
    step, the per-step values of all edges.
    """
    dims = list(dims)
    q = sum(dims)
    p = np.empty(q * horizon, dtype=np.intp)
    edge_start = np.concatenate([[0], np.cumsum([horizon * d for d in dims])])[:-1]
    offsets = np.concatenate([[0], np.cumsum(dims)])[:-1]
    for e, d in enumerate(dims):
        for t in range(horizon):
            for j in range(d):
                p[t * q + offsets[e] + j] = edge_start[e] + t * d + j
    return p


@dataclass(frozen=True)
class LocalCost:
    """Quadratic contribution ``J_s`` of one subsystem to the central cost.

    Weights are per time step and are tiled over the horizon:

        J_s = sum_i |y(k+i+1) - y_target|^2_Wy + |u(k+i)|^2_Wu
                    + |u(k+i) - u(k+i-1)|^2_Wdu + |v_in(k+i)|^2_Wv
              + |r - r_target|^2_Wr

    ``u(k-1)`` is ``u_prev``, the input applied in the previous period (zero
    deviation if unset). The increment term gives offset-free tracking.
    """

    Wy: Optional[np.ndarray] = None
    Wu: Optional[np.ndarray] = None
    Wv: Optional[np.ndarray] = None
    Wr: Optional[np.ndarray] = None
    Wdu: Optional[np.ndarray] = None
    y_target: Optional[np.ndarray] = None
    r_target: Optional[np.ndarray] = None
    u_prev: Optional[np.ndarray] = None

    def resolved(self, ny: int, m: int, q: int, nr: int) -> "LocalCost":
        def vec(a, n):
            return np.zeros(n) if a is None else np.asarray(a, dtype=float).reshape(n)

        out = LocalCost(
            Wy=_weight(self.Wy, ny),
            Wu=_weight(self.Wu, m),
            Wv=_weight(self.Wv, q),
            Wr=_weight(self.Wr, nr),
            Wdu=_weight(self.Wdu, m),
            y_target=vec(self.y_target, ny),
            r_target=vec(self.r_target, nr),
            u_prev=vec(self.u_prev, m),
        )
        active = {k for k in ("Wy", "Wu", "Wv", "Wr", "Wdu") if np.any(getattr(out, k))}
        object.__setattr__(out, "_active", frozenset(active))
        return out

    def scaled(self, factor: float, which: str = "Wy") -> "LocalCost":
        w = getattr(self, which)
        return replace(self, **{which: None if w is None else factor * np.asarray(w, dtype=float)})

    def evaluate(self, y_prof, u_prof, v_prof, r, horizon: int) -> float:
        """Evaluate on time-major profiles; ``u_prof`` / ``r`` may be empty."""
        active = self.__dict__.get("_active")
        if active is None:
            raise RuntimeError("evaluate() needs a cost resolved against subsystem dimensions")
        N = horizon
        J = 0.0
        if "Wy" in active:
            ey = y_prof.reshape(N, -1) - self.y_target
            J += _quad(ey, self.Wy)
        if "Wu" in active or "Wdu" in active:
            u = u_prof.reshape(N, -1)
            if "Wu" in active:
                J += _quad(u, self.Wu)
            if "Wdu" in active:
                du = np.empty_like(u)
                du[0] = u[0] - self.u_prev
                np.subtract(u[1:], u[:-1], out=du[1:])
                J += _quad(du, self.Wdu)
        if "Wv" in active:
            J += _quad(v_prof.reshape(N, -1), self.Wv)
        if "Wr" in active and r is not None:
            er = np.asarray(r, dtype=float) - self.r_target
            J += float(er @ self.Wr @ er)
        return float(J)


def _quad(a: np.ndarray, W: np.ndarray) -> float:
    """``sum_t a_t^T W a_t`` for the rows of ``a``."""
    return float(np.vdot(a @ W, a))


def _prediction(A, B, E, C, horizon, first_step):
    """Stacked ``C x(k+i)`` for ``i = first_step .. first_step+N-1``.

    Returns the free-response, input and coupling-input matrices, all in
    time-major coordinates.
    """
    n = A.shape[0]
    m, q, p = B.shape[1], E.shape[1], C.shape[0]
    N = horizon
    powers = [np.eye(n)]
    for _ in range(N + 1):
        powers.append(A @ powers[-1])
    Px = np.zeros((N * p, n))
    Pu = np.zeros((N * p, N * m))
    Pv = np.zeros((N * p, N * q))
    for i in range(N):
        t = i + first_step
        rows = slice(i * p, (i + 1) * p)
        Px[rows] = C @ powers[t]
        for j in range(t):
            if j >= N:
                break
            CA = C @ powers[t - 1 - j]
            Pu[rows, j * m:(j + 1) * m] = CA @ B
            Pv[rows, j * q:(j + 1) * q] = CA @ E
    return Px, Pu, Pv


@dataclass(frozen=True, eq=False)
class LinearSubsystem:
    """Linearized subsystem with an affine local control law.

    ``B`` has zero columns for an uncontrolled subsystem, in which case the
    gains must be ``None``. For a controlled subsystem the gains act on
    ``(x_dev, r_dev, v_in_dev)`` and produce a time-major control profile.
    """

    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    C_v: np.ndarray
    C_y: np.ndarray
    horizon: int
    in_dims: tuple[int, ...] = ()
    out_dims: tuple[int, ...] = ()
    D_v: Optional[np.ndarray] = None
    K_x: Optional[np.ndarray] = None
    K_r: Optional[np.ndarray] = None
    K_v: Optional[np.ndarray] = None
    cost: LocalCost = field(default_factory=LocalCost)
    x_op: Optional[np.ndarray] = None
    u_op: Optional[np.ndarray] = None
    mpc_Q: Optional[np.ndarray] = None
    mpc_R: Optional[np.ndarray] = None

    def __post_init__(self):
        A = _mat(self.A)
        n = A.shape[0]
        q = int(sum(self.in_dims))
        p = int(sum(self.out_dims))
        B = np.asarray(self.B, dtype=float).reshape(n, -1) if np.size(self.B) else np.zeros((n, 0))
        E = np.asarray(self.E, dtype=float).reshape(n, q) if q else np.zeros((n, 0))
        C_v = np.asarray(self.C_v, dtype=float).reshape(p, n) if p else np.zeros((0, n))
        C_y = (
            np.asarray(self.C_y, dtype=float).reshape(-1, n)
            if self.C_y is not None and np.size(self.C_y)
            else np.zeros((0, n))
        )
        D_v = (
            np.asarray(self.D_v, dtype=float).reshape(p, q)
            if self.D_v is not None and np.size(self.D_v)
            else np.zeros((p, q))
        )
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("A", A)
        set_("B", B)
        set_("E", E)
        set_("C_v", C_v)
        set_("C_y", C_y)
        set_("D_v", D_v)
        set_("in_dims", tuple(int(d) for d in self.in_dims))
        set_("out_dims", tuple(int(d) for d in self.out_dims))
        set_("x_op", np.zeros(n) if self.x_op is None else np.asarray(self.x_op, float).reshape(n))
        m = B.shape[1]
        set_("u_op", np.zeros(m) if self.u_op is None else np.asarray(self.u_op, float).reshape(m))
        ny = C_y.shape[0]
        N = self.horizon
        if m == 0:
            if any(k is not None for k in (self.K_x, self.K_r, self.K_v)):
                raise ModeError("uncontrolled subsystem cannot carry control gains")
        else:
            if self.K_x is None and self.K_r is None and self.K_v is None:
                Q = np.eye(ny) if self.mpc_Q is None else self.mpc_Q
                R = np.eye(m) if self.mpc_R is None else self.mpc_R
                K_x, K_r, K_v = mpc_gains(self, Q, R)
            else:
                K_x, K_r, K_v = self.K_x, self.K_r, self.K_v
            nr = ny if K_r is None else np.asarray(K_r).reshape(N * m, -1).shape[1]
            set_("K_x", np.asarray(K_x, float).reshape(N * m, n))
            set_("K_r", np.zeros((N * m, nr)) if K_r is None else np.asarray(K_r, float).reshape(N * m, nr))
            set_("K_v", np.zeros((N * m, N * q)) if K_v is None else np.asarray(K_v, float).reshape(N * m, N * q))
        set_("cost", self.cost.resolved(ny, m, q, self.setpoint_dim))

    # dimensions -----------------------------------------------------------

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    @property
    def output_dim(self) -> int:
        return self.C_y.shape[0]

    @property
    def setpoint_dim(self) -> int:
        if self.input_dim == 0:
            return 0
        if self.K_r is not None and np.ndim(self.K_r) == 2:
            return self.K_r.shape[1]
        return self.output_dim

    @property
    def controlled(self) -> bool:
        return self.input_dim > 0

    @property
    def in_dim(self) -> int:
        return self.horizon * sum(self.in_dims)

    @property
    def out_dim(self) -> int:
        return self.horizon * sum(self.out_dims)

    @property
    def u_dim(self) -> int:
        return self.horizon * self.input_dim

    # prediction matrices ---------------------------------------------------

    @cached_property
    def _in_perm(self) -> np.ndarray:
        return edge_to_time_perm(self.in_dims, self.horizon)

    @cached_property
    def _out_perm(self) -> np.ndarray:
        return edge_to_time_perm(self.out_dims, self.horizon)

    def _v_to_edge(self, M_time_rows: np.ndarray) -> np.ndarray:
        """Reorder rows from time-major to edge-major outgoing layout."""
        out = np.empty_like(M_time_rows)
        out[self._out_perm] = M_time_rows
        return out

    def _v_from_edge(self, M_time_cols: np.ndarray) -> np.ndarray:
        """Reorder columns so the matrix accepts edge-major incoming profiles."""
        out = np.empty_like(M_time_cols)
        out[:, self._in_perm] = M_time_cols
        return out

    @cached_property
    def _coupling_maps(self):
        Px, Pu, Pv = _prediction(self.A, self.B, self.E, self.C_v, self.horizon, 0)
        Pv = Pv + np.kron(np.eye(self.horizon), self.D_v)
        return (
            self._v_to_edge(Px),
            self._v_to_edge(Pu),
            self._v_from_edge(self._v_to_edge(Pv)),
        )

    @property
    def Phi_x(self) -> np.ndarray:
        return self._coupling_maps[0]

    @property
    def Phi_u(self) -> np.ndarray:
        return self._coupling_maps[1]

    @property
    def Phi_v(self) -> np.ndarray:
        return self._coupling_maps[2]

    @cached_property
    def _tracking_maps(self):
        Yx, Yu, Yv = _prediction(self.A, self.B, self.E, self.C_y, self.horizon, 1)
        return Yx, Yu, self._v_from_edge(Yv)

    @property
    def Y_x(self) -> np.ndarray:
        return self._tracking_maps[0]

    @property
    def Y_u(self) -> np.ndarray:
        return self._tracking_maps[1]

    @property
    def Y_v(self) -> np.ndarray:
        return self._tracking_maps[2]

    @cached_property
    def Psi_x(self) -> np.ndarray:
        if not self.controlled:
            return self.Phi_x
        return self.Phi_x + self.Phi_u @ self.K_x

    @cached_property
    def Psi_v(self) -> np.ndarray:
        if not self.controlled:
            return self.Phi_v
        return self.Phi_v + self.Phi_u @ self.K_v

    @cached_property
    def Psi_r(self) -> np.ndarray:
        if not self.controlled:
            return np.zeros((self.out_dim, 0))
        return self.Phi_u @ self.K_r

    # behaviour -------------------------------------------------------------

    def with_gains(self, Q, R) -> "LinearSubsystem":
        """Same model with local MPC gains redesigned for weights ``Q``, ``R``."""
        if not self.controlled:
            raise ModeError("uncontrolled subsystem has no local controller to retune")
        return replace(self, K_x=None, K_r=None, K_v=None, mpc_Q=Q, mpc_R=R)

    def respond(self, x, v_in, r=None, u=None):
        return respond(self, x, v_in, r=r, u=u)


def mpc_gains(sub: LinearSubsystem, Q, R):
    """Gains of the unconstrained finite-horizon tracking MPC.

    Minimises ``sum |y(k+i+1) - r|^2_Q + |u(k+i)|^2_R`` over the control
    profile for a presumed incoming profile, which gives
    ``u = K_x x + K_r r + K_v v_in``.
    """
    N, m, ny = sub.horizon, sub.input_dim, sub.output_dim
    Qb = np.kron(np.eye(N), _weight(Q, ny))
    Rb = np.kron(np.eye(N), _weight(R, m))
    Yx, Yu, Yv = sub._tracking_maps
    H = Yu.T @ Qb @ Yu + Rb
    F = np.linalg.solve(H, Yu.T @ Qb)
    T = np.kron(np.ones((N, 1)), np.eye(ny))
    return -F @ Yx, F @ T, -F @ Yv


def control_profile(sub: LinearSubsystem, x_dev, r_dev, v_in_dev) -> np.ndarray:
    """Affine local control law ``K_x x + K_r r + K_v v_in``."""
    if not sub.controlled:
        raise ModeError("control_profile called on an uncontrolled subsystem")
    x = np.asarray(x_dev, dtype=float).reshape(sub.state_dim)
    r = np.asarray(r_dev, dtype=float).reshape(sub.setpoint_dim)
    v = np.asarray(v_in_dev, dtype=float).reshape(sub.in_dim)
    return sub.K_x @ x + sub.K_r @ r + sub.K_v @ v


def respond(sub: LinearSubsystem, x_dev, v_in_dev, r=None, u=None):
    """Outgoing profile and local cost for a presumed incoming profile.

    Controlled subsystems take exactly one of ``r`` (set-point mode, the
    local law computes ``u``) or ``u`` (control-profile mode). Uncontrolled
    subsystems take neither.
    """
    x = np.asarray(x_dev, dtype=float).reshape(-1)
    v = np.asarray(v_in_dev, dtype=float).reshape(-1)
    if x.size != sub.state_dim:
        raise ValueError(f"state has length {x.size}, expected {sub.state_dim}")
    if v.size != sub.in_dim:
        raise ValueError(f"incoming profile has length {v.size}, expected {sub.in_dim}")
    if not sub.controlled:
        if r is not None or u is not None:
            raise ModeError("uncontrolled subsystem takes no set-point or control profile")
        u_prof = np.zeros(0)
    elif (r is None) == (u is None):
        raise ModeError("controlled subsystem needs exactly one of r or u")
    elif u is not None:
        u_prof = np.asarray(u, dtype=float).reshape(-1)
        if u_prof.size != sub.u_dim:
            raise ValueError(f"control profile has length {u_prof.size}, expected {sub.u_dim}")
    else:
        u_prof = control_profile(sub, x, r, v)

    v_out = sub.Phi_x @ x + sub.Phi_v @ v
    y = sub.Y_x @ x + sub.Y_v @ v
    if u_prof.size:
        v_out = v_out + sub.Phi_u @ u_prof
        y = y + sub.Y_u @ u_prof
    v_time = v[sub._in_perm]
    J = sub.cost.evaluate(y, u_prof, v_time, r, sub.horizon)
    return v_out, J


class BlackBoxSubsystem:
    """Opaque response map with the same call signature as ``respond``.

    ``fn(x, v_in, r=None, u=None) -> (v_out, J)`` must be deterministic.
    Only the interface dimensions are exposed; no model matrices.
    """

    def __init__(
        self,
        fn: Callable,
        *,
        state_dim: int,
        in_dim: int,
        out_dim: int,
        setpoint_dim: int = 0,
        u_dim: int = 0,
        horizon: int = 1,
    ):
        self.fn = fn
        self.state_dim = state_dim
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.setpoint_dim = setpoint_dim
        self.u_dim = u_dim
        self.horizon = horizon

    @property
    def controlled(self) -> bool:
        return self.u_dim > 0 or self.setpoint_dim > 0

    @property
    def input_dim(self) -> int:
        return self.u_dim // self.horizon

    def respond(self, x, v_in, r=None, u=None):
        return self.fn(x, v_in, r=r, u=u)

    @classmethod
    def wrap(cls, sub: LinearSubsystem) -> "BlackBoxSubsystem":
        return cls(
            lambda x, v, r=None, u=None: respond(sub, x, v, r=r, u=u),
            state_dim=sub.state_dim,
            in_dim=sub.in_dim,
            out_dim=sub.out_dim,
            setpoint_dim=sub.setpoint_dim,
            u_dim=sub.u_dim,
            horizon=sub.horizon,
        )


def check_compatible(topology: NetworkTopology, subsystems: Sequence) -> None:
    """Raise ``ValueError`` if the subsystem list does not fit the topology."""
    if len(subsystems) != topology.n_subsystems:
        raise ValueError(
            f"{len(subsystems)} subsystems for a topology of {topology.n_subsystems}"
        )
    for s, sub in enumerate(subsystems):
        if sub.in_dim != topology.in_dim(s) or sub.out_dim != topology.out_dim(s):
            raise ValueError(
                f"subsystem {s}: profile dims (in={sub.in_dim}, out={sub.out_dim}) do "
                f"not match topology (in={topology.in_dim(s)}, out={topology.out_dim(s)})"
            )
        if isinstance(sub, LinearSubsystem):
            if sub.horizon != topology.horizon:
                raise ValueError(f"subsystem {s}: horizon {sub.horizon} != {topology.horizon}")
            if (sub.in_dims, sub.out_dims) != (topology.in_dims(s), topology.out_dims(s)):
                raise ValueError(f"subsystem {s}: per-edge dims do not match topology")
        if sub.controlled != topology.is_controlled(s):
            kind = "controlled" if topology.is_controlled(s) else "uncontrolled"
            raise ValueError(f"subsystem {s} is declared {kind} in the topology")


@dataclass(frozen=True)
class CondensedModel:
    """Global linear maps of one coordinator round.

    ``v_hat = M_v @ v_in + M_x @ x + M_r @ r`` with ``x`` stacked over all
    subsystems and ``r`` over controlled ones, both in index order.
    """

    M_v: np.ndarray
    M_x: np.ndarray
    M_r: np.ndarray
    Psi_x: tuple
    Psi_v: tuple
    Psi_r: tuple

    def round(self, v_in, x, r) -> np.ndarray:
        return self.M_v @ v_in + self.M_x @ x + self.M_r @ r


def _blockdiag(blocks):
    blocks = [np.asarray(b, dtype=float).reshape(np.shape(b)) for b in blocks]
    if not blocks:
        return np.zeros((0, 0))
    return block_diag(*blocks)


def build_condensed(topology: NetworkTopology, subsystems: Sequence) -> CondensedModel:
    """Assemble ``M_v``, ``M_x`` and ``M_r`` from linear subsystems."""
    if any(not isinstance(s, LinearSubsystem) for s in subsystems):
        raise TypeError("condensed form needs linear subsystems; got a black-box subsystem")
    check_compatible(topology, subsystems)
    G = build_routing_matrix(topology).matrix.astype(float)
    Psi_v = tuple(s.Psi_v for s in subsystems)
    Psi_x = tuple(s.Psi_x for s in subsystems)
    Psi_r = tuple(s.Psi_r for s in subsystems)
    # incoming stacking is already the concatenation of per-subsystem v_s^in
    M_v = G @ _blockdiag(Psi_v)
    M_x = G @ _blockdiag(Psi_x)
    ctr = [s for s in range(topology.n_subsystems) if topology.is_controlled(s)]
    blocks_r = [Psi_r[s] if s in ctr else np.zeros((subsystems[s].out_dim, 0)) for s in range(len(subsystems))]
    M_r = G @ _blockdiag(blocks_r)
    D = topology.dim
    return CondensedModel(
        M_v=M_v.reshape(D, D),
        M_x=M_x.reshape(D, -1) if D else np.zeros((0, sum(s.state_dim for s in subsystems))),
        M_r=M_r.reshape(D, -1) if D else np.zeros((0, sum(s.setpoint_dim for s in subsystems))),
        Psi_x=Psi_x,
        Psi_v=Psi_v,
        Psi_r=Psi_r,
    )
