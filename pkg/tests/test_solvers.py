import numpy as np
import pytest

from degen_spde.mesh import build_mesh, build_operator
from degen_spde.rng import stream
from degen_spde.solvers import (EnergyReport, ProblemSpec, backward_residual,
                                duality_residual, energy_report,
                                epsilon_convergence, forward_residual,
                                solve_backward, solve_forward,
                                trajectory_distance, trajectory_rows)
from degen_spde.tree import build_tree


def random_steps(tree, N, rng, scale=1.0):
    return [scale * rng.standard_normal((tree.node_count(k), N))
            for k in range(tree.n)]


@pytest.fixture(scope="module")
def frame():
    return build_tree(5, 1.5), build_mesh(24)


def test_forward_zero_data(frame):
    tree, mesh = frame
    traj = solve_forward(ProblemSpec(alpha=0.5, eps=0.01), tree, mesh)
    assert all(np.all(v == 0.0) for v in traj.state.values)


def test_forward_deterministic_no_branching(frame):
    tree, mesh = frame
    spec = ProblemSpec(alpha=0.5, eps=0.01, f=1.0,
                       y0=np.sin(np.pi * mesh.centers))
    traj = solve_forward(spec, tree, mesh)
    for v in traj.state.values:
        assert np.max(np.ptp(v, axis=0)) == 0.0


def test_forward_superposition(frame):
    tree, mesh = frame
    rng = stream(0, "superpose")
    y1 = rng.standard_normal(mesh.N)
    y2 = rng.standard_normal(mesh.N)
    base = dict(alpha=0.5, eps=0.01, a=0.3, b=-0.2, c=0.4)
    t1 = solve_forward(ProblemSpec(**base, y0=y1), tree, mesh)
    t2 = solve_forward(ProblemSpec(**base, y0=y2), tree, mesh)
    t12 = solve_forward(ProblemSpec(**base, y0=y1 + y2), tree, mesh)
    for k in range(tree.n + 1):
        assert np.allclose(t12.state.values[k],
                           t1.state.values[k] + t2.state.values[k],
                           atol=1e-12)


def test_backward_zero_terminal(frame):
    tree, mesh = frame
    traj = solve_backward(ProblemSpec(alpha=0.5, eps=0.01), tree, mesh,
                          np.zeros(mesh.N))
    assert all(np.all(v == 0.0) for v in traj.state.values)
    assert all(np.all(v == 0.0) for v in traj.martingale.values)


def test_backward_deterministic_terminal(frame):
    tree, mesh = frame
    zT = np.sin(np.pi * np.linspace(0, 1, mesh.N))
    traj = solve_backward(ProblemSpec(alpha=0.5, eps=0.01), tree, mesh, zT)
    for k in range(tree.n):
        assert np.max(np.abs(traj.martingale.values[k])) == 0.0
    # plain backward heat recursion: z_k = (I - dt A)^{-1} z_{k+1}
    op = build_operator(mesh, 0.5, 0.01)
    z = np.broadcast_to(zT, (1, mesh.N))
    for k in range(tree.n - 1, -1, -1):
        z = op.solve_shifted(tree.dt, z)
        assert np.allclose(traj.state.values[k][0], z[0], atol=1e-13)


def test_backward_children_reconstruct(frame):
    tree, mesh = frame
    rng = stream(1, "reconstruct")
    spec = ProblemSpec(alpha=0.5, eps=0.01, a=0.2, b=0.1, c=0.3)
    zT = rng.standard_normal((tree.node_count(tree.n), mesh.N))
    traj = solve_backward(spec, tree, mesh, zT)
    op = traj.operator
    for k in range(tree.n):
        mean = op.apply_shifted(tree.dt, traj.diffused_mean.values[k])
        slope = op.apply_shifted(tree.dt, traj.martingale.values[k])
        ch = traj.state.values[k + 1]
        assert np.allclose(ch[0::2], mean + tree.sqrt_dt * slope, atol=1e-12)
        assert np.allclose(ch[1::2], mean - tree.sqrt_dt * slope, atol=1e-12)


def test_duality_random_ensemble():
    tree, mesh = build_tree(6, 1.0), build_mesh(32)
    for i in range(20):
        rng = stream(2, "duality", i)
        spec = ProblemSpec(alpha=0.4, eps=0.02, a=0.4, b=-0.3, c=0.5,
                           y0=rng.standard_normal(mesh.N),
                           f=random_steps(tree, mesh.N, rng),
                           F=random_steps(tree, mesh.N, rng))
        g = random_steps(tree, mesh.N, rng)
        G = random_steps(tree, mesh.N, rng)
        src = random_steps(tree, mesh.N, rng)
        zT = rng.standard_normal((tree.node_count(tree.n), mesh.N))
        fwd = solve_forward(spec, tree, mesh, g=g, G=G)
        bwd = solve_backward(spec, tree, mesh, zT, source=src)
        res = duality_residual(spec, tree, mesh, fwd, bwd, g=g, G=G,
                               backward_source=src)
        assert res <= 1e-10


def test_duality_mismatch_detected():
    tree, mesh = build_tree(4, 1.0), build_mesh(16)
    rng = stream(3, "mismatch")
    spec = ProblemSpec(alpha=0.5, eps=0.02, b=0.5, y0=rng.standard_normal(mesh.N))
    zT = rng.standard_normal((tree.node_count(tree.n), mesh.N))
    fwd = solve_forward(spec, tree, mesh)
    wrong = ProblemSpec(alpha=0.5, eps=0.02, b=0.8)
    bwd = solve_backward(wrong, tree, mesh, zT)
    res = duality_residual(spec, tree, mesh, fwd, bwd)
    assert res > 1e-6


def test_transpose_against_brute_force_assembly():
    """Assemble the full forward map and check the backward solve is its
    exact transpose under the duality pairing (small scale, all coefficients)."""
    tree, mesh = build_tree(3, 1.0), build_mesh(8)
    N, n = mesh.N, tree.n
    rng = stream(4, "brute")
    a = 0.4 * rng.standard_normal(N)
    b = 0.3 * rng.standard_normal(N)
    c = 0.5 * rng.standard_normal(N)
    spec = ProblemSpec(alpha=0.5, eps=0.05, a=a, b=b, c=c)

    blocks = [("y0", N)]
    for k in range(n):
        blocks.append((f"g{k}", tree.node_count(k) * N))
    for k in range(n):
        blocks.append((f"G{k}", tree.node_count(k) * N))
    dim_in = sum(d for _, d in blocks)
    dim_out = tree.node_count(n) * N

    def run(vec):
        ofs = 0
        y0 = vec[:N]
        ofs = N
        g, G = [], []
        for k in range(n):
            cnt = tree.node_count(k) * N
            g.append(vec[ofs:ofs + cnt].reshape(tree.node_count(k), N))
            ofs += cnt
        for k in range(n):
            cnt = tree.node_count(k) * N
            G.append(vec[ofs:ofs + cnt].reshape(tree.node_count(k), N))
            ofs += cnt
        spec_run = ProblemSpec(alpha=0.5, eps=0.05, a=a, b=b, c=c, y0=y0)
        traj = solve_forward(spec_run, tree, mesh, g=g, G=G)
        return traj.state.values[n].ravel()

    fwd_mat = np.zeros((dim_out, dim_in))
    for j in range(dim_in):
        e = np.zeros(dim_in)
        e[j] = 1.0
        fwd_mat[:, j] = run(e)

    # adjoint map: z_T -> (z(0), V_k, Z_k) with the duality measure weights
    adj_mat = np.zeros((dim_in, dim_out))
    for j in range(dim_out):
        zT = np.zeros(dim_out)
        zT[j] = 1.0
        bwd = solve_backward(spec, tree, mesh, zT.reshape(tree.node_count(n), N))
        parts = [mesh.h * bwd.state.values[0].ravel()]
        for k in range(n):
            parts.append(tree.dt * mesh.h / tree.node_count(k)
                         * bwd.diffused_mean.values[k].ravel())
        for k in range(n):
            parts.append(tree.dt * mesh.h / tree.node_count(k)
                         * bwd.martingale.values[k].ravel())
        adj_mat[:, j] = np.concatenate(parts)

    w_leaf = mesh.h / tree.node_count(n)
    gap = np.max(np.abs(fwd_mat.T * w_leaf - adj_mat))
    assert gap <= 1e-12


def test_residual_gates_accept_own_output(frame):
    tree, mesh = frame
    rng = stream(5, "gates")
    spec = ProblemSpec(alpha=0.6, eps=0.03, a=0.2, b=0.1, c=0.2,
                       y0=rng.standard_normal(mesh.N),
                       f=random_steps(tree, mesh.N, rng))
    fwd = solve_forward(spec, tree, mesh)
    assert forward_residual(spec, tree, mesh, fwd) <= 1e-12
    src = random_steps(tree, mesh.N, rng)
    bwd = solve_backward(spec, tree, mesh,
                         rng.standard_normal((tree.node_count(tree.n), mesh.N)),
                         source=src)
    assert backward_residual(spec, tree, mesh, bwd, source=src) <= 1e-12


def test_plain_convection_needs_small_alpha():
    with pytest.raises(ValueError, match="decomposed"):
        ProblemSpec(alpha=1.2, a=0.5)
    # decomposed mode lifts the restriction
    ProblemSpec(alpha=1.2, a=0.5, coefficient_mode="decomposed")


def test_decomposed_mode_duality():
    tree, mesh = build_tree(4, 1.0), build_mesh(16)
    rng = stream(6, "decomposed")
    spec = ProblemSpec(alpha=1.4, eps=0.02, a=0.5, b=0.1, c=0.2,
                       coefficient_mode="decomposed",
                       y0=rng.standard_normal(mesh.N))
    zT = rng.standard_normal((tree.node_count(tree.n), mesh.N))
    fwd = solve_forward(spec, tree, mesh)
    bwd = solve_backward(spec, tree, mesh, zT)
    assert duality_residual(spec, tree, mesh, fwd, bwd) <= 1e-10


# ---------------------------------------------------------------------------
# energy and regularization


def test_energy_zero_data(frame):
    tree, mesh = frame
    spec = ProblemSpec(alpha=0.5, eps=0.01)
    rep = energy_report(solve_forward(spec, tree, mesh), spec, tree, mesh)
    assert rep.sup_state == 0.0 and rep.grad_energy == 0.0 and rep.fitted == 0.0


def test_energy_dissipative_without_sources(frame):
    tree, mesh = frame
    y0 = np.sin(np.pi * mesh.centers)
    spec = ProblemSpec(alpha=0.5, eps=0.01, y0=y0)
    traj = solve_forward(spec, tree, mesh)
    norms = [float(mesh.l2_norm_sq(v).mean()) for v in traj.state.values]
    assert max(norms) <= norms[0] * (1.0 + 1e-12)
    assert norms[-1] < norms[0]


def test_energy_fitted_refinement_trend():
    tree = build_tree(5, 1.0)
    fits = []
    for N in (24, 48):
        mesh = build_mesh(N)
        rng = stream(7, f"energy{N}")
        y0 = np.sin(np.pi * mesh.centers)
        spec = ProblemSpec(alpha=0.5, eps=0.01, y0=y0, f=0.5, F=0.3)
        rep = energy_report(solve_forward(spec, tree, mesh), spec, tree, mesh)
        assert isinstance(rep, EnergyReport)
        fits.append(rep.fitted)
    assert fits[1] <= fits[0] * 1.05


def test_epsilon_convergence_identical_levels():
    tree, mesh = build_tree(4, 1.0), build_mesh(16)
    spec = ProblemSpec(alpha=0.5, eps=0.0, y0=np.sin(np.pi * mesh.centers))
    rows = epsilon_convergence(spec, tree, mesh, [0.05, 0.05])
    assert rows[0][2] == 0.0


def test_epsilon_convergence_monotone():
    tree, mesh = build_tree(5, 1.5), build_mesh(32)
    spec = ProblemSpec(alpha=0.5, eps=0.0, y0=np.sin(np.pi * mesh.centers))
    rows = epsilon_convergence(spec, tree, mesh, [0.1 / 2**i for i in range(5)])
    dists = [r[2] for r in rows]
    assert all(b < a for a, b in zip(dists, dists[1:]))


def test_trajectory_distance_and_rows(frame):
    tree, mesh = frame
    spec = ProblemSpec(alpha=0.5, eps=0.01, y0=np.sin(np.pi * mesh.centers))
    traj = solve_forward(spec, tree, mesh)
    assert trajectory_distance(traj, traj, mesh) == 0.0
    header, rows = trajectory_rows(traj)
    assert header == ["step", "node", "x_index", "value"]
    assert len(rows) == sum(tree.node_count(k) * mesh.N
                            for k in range(tree.n + 1))
