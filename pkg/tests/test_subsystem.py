import numpy as np
import pytest

from fpcoord.coordinator import CoordinatorProblem, coordinator_round
from fpcoord.fp_engine import spectral_radius
from fpcoord.instances import random_network, random_topology
from fpcoord.network import EdgeSpec, NetworkTopology
from fpcoord.subsystem import (
    BlackBoxSubsystem,
    LinearSubsystem,
    LocalCost,
    ModeError,
    build_condensed,
    edge_to_time_perm,
    respond,
)


def simulate(sub, x0, v_in, u):
    """Step-by-step rollout; returns edge-major v_out, time-major y and v_in per step."""
    N = sub.horizon
    in_dims, out_dims = list(sub.in_dims), list(sub.out_dims)
    # per-step incoming vectors, read edge block by edge block
    steps, start = [[] for _ in range(N)], 0
    for d in in_dims:
        block = v_in[start:start + N * d].reshape(N, d)
        for t in range(N):
            steps[t].append(block[t])
        start += N * d
    v_steps = [np.concatenate(s) if s else np.zeros(0) for s in steps]
    u = np.asarray(u, dtype=float).reshape(N, -1) if sub.input_dim else np.zeros((N, 0))
    x = np.array(x0, dtype=float)
    vo_steps, ys = [], []
    for t in range(N):
        vo_steps.append(sub.C_v @ x + sub.D_v @ v_steps[t])
        x = sub.A @ x + sub.B @ u[t] + sub.E @ v_steps[t]
        ys.append(sub.C_y @ x)
    out, off = [], 0
    for d in out_dims:
        out.append(np.concatenate([vo[off:off + d] for vo in vo_steps]))
        off += d
    v_out = np.concatenate(out) if out else np.zeros(0)
    return v_out, np.concatenate(ys), np.concatenate(v_steps) if v_steps else np.zeros(0)


def cost_oracle(sub, y, u, v_time, r=None):
    c = sub.cost
    N = sub.horizon
    J = 0.0
    Y = y.reshape(N, -1)
    for t in range(N):
        e = Y[t] - c.y_target
        J += e @ c.Wy @ e
    if sub.input_dim:
        U = u.reshape(N, -1)
        prev = c.u_prev
        for t in range(N):
            J += U[t] @ c.Wu @ U[t] + (U[t] - prev) @ c.Wdu @ (U[t] - prev)
            prev = U[t]
    V = v_time.reshape(N, -1) if v_time.size else np.zeros((N, 0))
    for t in range(N):
        J += V[t] @ c.Wv @ V[t]
    if r is not None:
        e = np.asarray(r) - c.r_target
        J += e @ c.Wr @ e
    return J


def test_edge_to_time_perm_small():
    # two edges of dims 1 and 2 over 2 steps: edge-major [a0 a1 | b0 b0' b1 b1']
    p = edge_to_time_perm([1, 2], 2)
    np.testing.assert_array_equal(p, [0, 2, 3, 1, 4, 5])


def test_respond_matches_simulation_control_profile(rng):
    for _ in range(20):
        top, subs = random_network(rng, feedthrough=True)
        for s, sub in enumerate(subs):
            x = rng.standard_normal(sub.state_dim)
            v = rng.standard_normal(sub.in_dim)
            u = rng.standard_normal(sub.u_dim) if sub.controlled else None
            v_out, J = respond(sub, x, v, u=u)
            v_ref, y_ref, v_time = simulate(sub, x, v, u if u is not None else [])
            np.testing.assert_allclose(v_out, v_ref, atol=1e-10)
            assert J == pytest.approx(cost_oracle(sub, y_ref, u if u is not None else np.zeros(0), v_time), rel=1e-10, abs=1e-10)


def test_set_point_mode_solves_local_tracking_problem(rng):
    # oracle: build the input-to-output map by unit impulses and solve the
    # regularised tracking problem by stacked least squares
    top = NetworkTopology(2, [EdgeSpec(0, 1, 1), EdgeSpec(1, 0, 2)], controlled=[0], horizon=4)
    _, subs = random_network(rng, topology=top)
    sub = subs[0]
    x = rng.standard_normal(sub.state_dim)
    v = rng.standard_normal(sub.in_dim)
    r = rng.standard_normal(sub.output_dim)
    N, m, ny = sub.horizon, sub.input_dim, sub.output_dim
    y0 = simulate(sub, x, v, np.zeros(N * m))[1]
    cols = []
    for j in range(N * m):
        e = np.zeros(N * m)
        e[j] = 1.0
        cols.append(simulate(sub, np.zeros_like(x), np.zeros_like(v), e)[1])
    Yu = np.column_stack(cols)
    Q = np.kron(np.eye(N), np.asarray(sub.mpc_Q))
    Rw = np.kron(np.eye(N), np.asarray(sub.mpc_R))
    A = np.vstack([np.linalg.cholesky(Q).T @ Yu, np.linalg.cholesky(Rw).T])
    b = np.concatenate([np.linalg.cholesky(Q).T @ (np.tile(r, N) - y0), np.zeros(N * m)])
    u_ref = np.linalg.lstsq(A, b, rcond=None)[0]
    u = sub.K_x @ x + sub.K_r @ r + sub.K_v @ v
    np.testing.assert_allclose(u, u_ref, atol=1e-9)
    v_out, _ = respond(sub, x, v, r=r)
    np.testing.assert_allclose(v_out, simulate(sub, x, v, u_ref)[0], atol=1e-9)


def test_mode_errors():
    top = NetworkTopology(2, [EdgeSpec(0, 1, 1)], controlled=[0], horizon=2)
    _, subs = random_network(np.random.default_rng(0), topology=top)
    x0 = np.zeros(subs[0].state_dim)
    with pytest.raises(ModeError):
        respond(subs[0], x0, np.zeros(0))
    with pytest.raises(ModeError):
        respond(subs[0], x0, np.zeros(0), r=np.zeros(subs[0].setpoint_dim), u=np.zeros(subs[0].u_dim))
    with pytest.raises(ModeError):
        respond(subs[1], np.zeros(subs[1].state_dim), np.zeros(2), r=np.zeros(1))
    with pytest.raises(ValueError, match="incoming"):
        respond(subs[1], np.zeros(subs[1].state_dim), np.zeros(3))


def test_zero_deviation_gives_zero_response(rng):
    top, subs = random_network(rng, feedthrough=True)
    for sub in subs:
        kw = {"u": np.zeros(sub.u_dim)} if sub.controlled else {}
        v_out, J = respond(sub, np.zeros(sub.state_dim), np.zeros(sub.in_dim), **kw)
        assert not np.any(v_out)
        assert J == 0.0


def test_condensed_matches_simulated_round(rng):
    for _ in range(20):
        top, subs = random_network(rng, feedthrough=bool(rng.integers(2)))
        cm = build_condensed(top, subs)
        x = [rng.standard_normal(s.state_dim) for s in subs]
        ctr = sorted(top.controlled)
        r = np.concatenate([rng.standard_normal(subs[s].setpoint_dim) for s in ctr]) if ctr else np.zeros(0)
        v = rng.standard_normal(top.dim)
        problem = CoordinatorProblem(top, subs, x, r)
        v_hat, _ = coordinator_round(problem, v)
        np.testing.assert_allclose(cm.round(v, np.concatenate(x), r), v_hat.data, atol=1e-10)


def test_feedthrough_ring_spectral_radius():
    # one-step horizon, zero dynamics: v0_out = a v0_in, v1_out = b v1_in
    # M_v = [[0, b], [a, 0]] whose spectral radius is sqrt(a b)
    a, b = 0.8, 0.45
    top = NetworkTopology(2, [EdgeSpec(0, 1, 1), EdgeSpec(1, 0, 1)], horizon=1)

    def node(d):
        return LinearSubsystem(
            A=[[0.0]], B=np.zeros((1, 0)), E=[[0.0]], C_v=[[0.0]], C_y=np.zeros((0, 1)),
            D_v=[[d]], horizon=1, in_dims=(1,), out_dims=(1,),
        )

    M_v = build_condensed(top, [node(a), node(b)]).M_v
    np.testing.assert_allclose(M_v, [[0.0, b], [a, 0.0]], atol=0)
    assert spectral_radius(M_v) == pytest.approx(np.sqrt(a * b), abs=1e-14)


def test_condensed_rejects_black_box(rng):
    top, subs = random_network(rng)
    with pytest.raises(TypeError, match="black-box"):
        build_condensed(top, [BlackBoxSubsystem.wrap(s) for s in subs])


def test_local_cost_weight_shapes():
    c = LocalCost(Wy=[1.0, 2.0]).resolved(2, 0, 0, 0)
    np.testing.assert_array_equal(c.Wy, np.diag([1.0, 2.0]))
    with pytest.raises(ValueError, match="length"):
        LocalCost(Wy=[1.0]).resolved(2, 0, 0, 0)
    with pytest.raises(RuntimeError, match="resolved"):
        LocalCost().evaluate(np.zeros(2), np.zeros(0), np.zeros(0), None, 1)


def test_with_gains_redesigns_and_rejects_uncontrolled(benchmark):
    sub = benchmark.subsystems[0]
    tuned = sub.with_gains(10 * np.asarray(sub.mpc_Q), sub.mpc_R)
    assert not np.allclose(tuned.K_v, sub.K_v)
    with pytest.raises(ModeError):
        benchmark.subsystems[1].with_gains(1.0, 1.0)
