"""Forward and backward solvers on the filtration tree.

Forward scheme, per node m at step k with children 2m (+) and 2m+1 (-):

    rhs_pm   = y_k + dt*(a dy_k/dx + b y_k + f_k + g_k) +- sqrt(dt)*(c y_k + F_k + G_k)
    y_{k+1}  = (I - dt A)^{-1} rhs_pm

i.e. implicit diffusion, explicit drift/convection/reaction, explicit noise
evaluated at the step-k state.  The convection derivative is the centered
difference with zero ghost values.

Backward scheme.  Rather than discretizing the adjoint equation on its own,
each backward step is the exact transpose of the forward step:

    V_k = (I - dt A)^{-1} E[z_{k+1} | node]          (A symmetric)
    Z_k = (I - dt A)^{-1} (martingale slope of z_{k+1})
    z_k = V_k + dt*( -(d/dx)(a V_k) + b V_k + c Z_k - src_k )

With this pairing the discrete duality identity

    E<y_n, z_n> - E<y_0, z_0> =
        sum_k dt ( E<f_k + g_k, V_k> + E<F_k + G_k, Z_k> + E<y_k, src_k> )

holds to round-off, which is what makes the control module's conjugate
gradient minimize a true quadratic.  Note the pairing reads the diffused
conditional mean V, not z itself; the two differ at order dt when lower
order coefficients are present.
"""

from dataclasses import dataclass, field

import numpy as np

from .mesh import DegenerateOperator, SpatialMesh, build_operator
from .tree import AdaptedField, FiltrationTree, martingale_decomposition


@dataclass
class ProblemSpec:
    """Coefficients and data of one equation instance.

    Fields a, b, c, f, F accept None, a scalar, an (N,) vector, or a per-step
    list whose entries broadcast against (2^k, N); per-step lists are adapted
    by construction.  coefficient_mode 'decomposed' multiplies the given
    convection field by (x+eps)^(alpha/2), which is what lifts the
    well-posedness restriction alpha < 1 for nonzero convection.
    """

    alpha: float
    eps: float = 0.0
    T: float | None = None
    a: object = None
    b: object = None
    c: object = None
    f: object = None
    F: object = None
    y0: object = None
    coefficient_mode: str = "plain"

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must lie in (0,2), got {self.alpha}")
        if self.eps < 0.0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")
        if self.coefficient_mode not in ("plain", "decomposed"):
            raise ValueError(f"unknown coefficient mode {self.coefficient_mode!r}")
        if (self.coefficient_mode == "plain" and self.alpha >= 1.0
                and not _is_zero(self.a)):
            raise ValueError(
                "plain convection requires alpha in (0,1); use the "
                "decomposed mode for alpha in [1,2)")


def _is_zero(coef) -> bool:
    if coef is None:
        return True
    if np.isscalar(coef):
        return coef == 0
    return False


def _per_step(coef, tree: FiltrationTree, N: int, steps: int):
    """Normalize a coefficient/source to one broadcastable entry per step."""
    if coef is None or np.isscalar(coef):
        return [coef] * steps
    if isinstance(coef, AdaptedField):
        if coef.last_step < steps - 1:
            raise ValueError("adapted field does not cover every step")
        return [coef.values[k] for k in range(steps)]
    if isinstance(coef, (list, tuple)):
        if len(coef) < steps:
            raise ValueError(f"need {steps} per-step entries, got {len(coef)}")
        out = []
        for k in range(steps):
            e = coef[k]
            if e is None or np.isscalar(e):
                out.append(e)
                continue
            e = np.atleast_2d(np.asarray(e, dtype=float))
            if e.shape[-1] != N or e.shape[0] not in (1, tree.node_count(k)):
                raise ValueError(
                    f"step {k}: entry of shape {e.shape} does not broadcast "
                    f"against ({tree.node_count(k)}, {N})")
            out.append(e)
        return out
    arr = np.asarray(coef, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != N:
            raise ValueError(f"expected a length-{N} vector, got {arr.shape}")
        return [arr] * steps
    raise ValueError(f"cannot interpret coefficient of type {type(coef)!r}")


def _term(coef_k, values) -> np.ndarray | float:
    if coef_k is None:
        return 0.0
    return coef_k * values


def _add_field(acc, coef_k):
    if coef_k is None:
        return acc
    return acc + coef_k


def convection(a_k, v: np.ndarray, h: float):
    """a * centered x-derivative with zero ghost values; 0 if a is absent."""
    if a_k is None or (np.isscalar(a_k) and a_k == 0):
        return 0.0
    dv = np.zeros_like(v)
    dv[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / (2.0 * h)
    dv[..., 0] = v[..., 1] / (2.0 * h)
    dv[..., -1] = -v[..., -2] / (2.0 * h)
    return a_k * dv


def convection_transpose(a_k, w: np.ndarray, h: float):
    """Exact transpose of convection in the mesh inner product: -(d/dx)(a w)."""
    if a_k is None or (np.isscalar(a_k) and a_k == 0):
        return 0.0
    aw = a_k * w
    if np.isscalar(aw):
        return 0.0
    aw = np.broadcast_to(aw, w.shape) if aw.shape != w.shape else aw
    out = np.zeros_like(w)
    out[..., 1:-1] = -(aw[..., 2:] - aw[..., :-2]) / (2.0 * h)
    out[..., 0] = -aw[..., 1] / (2.0 * h)
    out[..., -1] = aw[..., -2] / (2.0 * h)
    return out


@dataclass
class Trajectory:
    """Tree-indexed solution; backward solves carry the martingale component
    Z and the diffused conditional mean V used in duality pairings."""

    state: AdaptedField
    martingale: AdaptedField | None = None
    diffused_mean: AdaptedField | None = None
    operator: DegenerateOperator | None = field(default=None, repr=False)

    @property
    def tree(self) -> FiltrationTree:
        return self.state.tree


def _effective_a(spec: ProblemSpec, mesh: SpatialMesh, a_steps):
    if spec.coefficient_mode != "decomposed":
        return a_steps
    profile = (mesh.centers + spec.eps) ** (0.5 * spec.alpha)
    return [None if a is None else a * profile for a in a_steps]


def _controls_per_step(ctrl, tree, N):
    if ctrl is None:
        return [None] * tree.n
    return _per_step(ctrl, tree, N, tree.n)


def solve_forward(spec: ProblemSpec, tree: FiltrationTree, mesh: SpatialMesh,
                  g=None, G=None) -> Trajectory:
    """March the forward equation; g is a drift control already supported on
    its interval, G a diffusion control on all of I."""
    if spec.T is not None and not np.isclose(spec.T, tree.T):
        raise ValueError(f"spec horizon {spec.T} does not match tree horizon {tree.T}")
    op = build_operator(mesh, spec.alpha, spec.eps)
    N = mesh.N
    n = tree.n
    dt, sq = tree.dt, tree.sqrt_dt

    a_steps = _effective_a(spec, mesh, _per_step(spec.a, tree, N, n))
    b_steps = _per_step(spec.b, tree, N, n)
    c_steps = _per_step(spec.c, tree, N, n)
    f_steps = _per_step(spec.f, tree, N, n)
    F_steps = _per_step(spec.F, tree, N, n)
    g_steps = _controls_per_step(g, tree, N)
    G_steps = _controls_per_step(G, tree, N)

    if spec.y0 is None:
        y = np.zeros((1, N))
    else:
        y = np.atleast_2d(np.asarray(spec.y0, dtype=float)).copy()
        if y.shape != (1, N):
            raise ValueError(f"initial datum must have shape ({N},), got {y.shape}")

    values = [y]
    for k in range(n):
        yk = np.broadcast_to(values[k], (tree.node_count(k), N))
        drift = yk + dt * (convection(a_steps[k], yk, mesh.h)
                           + _term(b_steps[k], yk)
                           + _zero_or(f_steps[k])
                           + _zero_or(g_steps[k]))
        noise = sq * (_term(c_steps[k], yk)
                      + _zero_or(F_steps[k]) + _zero_or(G_steps[k]))
        rhs = np.empty((tree.node_count(k + 1), N))
        rhs[0::2] = drift + noise
        rhs[1::2] = drift - noise
        values.append(op.solve_shifted(dt, rhs))
    return Trajectory(state=AdaptedField(tree, values), operator=op)


def _zero_or(v):
    return 0.0 if v is None else v


def solve_backward(spec: ProblemSpec, tree: FiltrationTree, mesh: SpatialMesh,
                   terminal, source=None) -> Trajectory:
    """Solve the adjoint/backward equation down from a terminal datum.

    terminal may be deterministic (N,) or leaf-indexed (2^n, N).  source is
    the backward drift datum (enters the duality identity paired with +y).
    Returns (z, Z, V): state on steps 0..n, martingale component and
    diffused mean on steps 0..n-1; z at step 0 is a single vector.
    """
    if spec.T is not None and not np.isclose(spec.T, tree.T):
        raise ValueError(f"spec horizon {spec.T} does not match tree horizon {tree.T}")
    op = build_operator(mesh, spec.alpha, spec.eps)
    N = mesh.N
    n = tree.n
    dt = tree.dt

    a_steps = _effective_a(spec, mesh, _per_step(spec.a, tree, N, n))
    b_steps = _per_step(spec.b, tree, N, n)
    c_steps = _per_step(spec.c, tree, N, n)
    src_steps = _per_step(source, tree, N, n)

    zT = np.atleast_2d(np.asarray(terminal, dtype=float))
    if zT.shape == (1, N):
        zT = np.broadcast_to(zT, (tree.node_count(n), N)).copy()
    if zT.shape != (tree.node_count(n), N):
        raise ValueError(
            f"terminal datum must have shape ({N},) or ({tree.node_count(n)}, {N})")

    z_values: list = [None] * (n + 1)
    v_values: list = [None] * n
    mart_values: list = [None] * n
    z_values[n] = zT
    for k in range(n - 1, -1, -1):
        ch = z_values[k + 1]
        mean, slope = martingale_decomposition(ch[0::2], ch[1::2], dt)
        stacked = op.solve_shifted(dt, np.concatenate([mean, slope], axis=0))
        V, Z = stacked[: tree.node_count(k)], stacked[tree.node_count(k):]
        zk = V + dt * (convection_transpose(a_steps[k], V, mesh.h)
                       + _term(b_steps[k], V)
                       + _term(c_steps[k], Z)
                       - _zero_or(src_steps[k]))
        z_values[k] = zk
        v_values[k] = V
        mart_values[k] = Z
    return Trajectory(state=AdaptedField(tree, z_values),
                      martingale=AdaptedField(tree, mart_values),
                      diffused_mean=AdaptedField(tree, v_values),
                      operator=op)


# ---------------------------------------------------------------------------
# pairings and diagnostics


def _epair(mesh: SpatialMesh, u, v) -> float:
    """E <u, v>_{L2(I)} with broadcasting over the node axis."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    prod = u * v
    return float(mesh.h * prod.sum(axis=-1).mean())


def duality_residual(spec: ProblemSpec, tree: FiltrationTree, mesh: SpatialMesh,
                     forward_traj: Trajectory, backward_traj: Trajectory,
                     g=None, G=None, backward_source=None) -> float:
    """Absolute defect of the discrete integration-by-parts identity."""
    n = tree.n
    dt = tree.dt
    y = forward_traj.state
    z = backward_traj.state
    V = backward_traj.diffused_mean
    Z = backward_traj.martingale
    if V is None or Z is None:
        raise ValueError("backward trajectory must carry (Z, V) components")

    lhs = _epair(mesh, y.values[n], z.values[n]) - _epair(mesh, y.values[0], z.values[0])

    f_steps = _per_step(spec.f, tree, mesh.N, n)
    F_steps = _per_step(spec.F, tree, mesh.N, n)
    g_steps = _controls_per_step(g, tree, mesh.N)
    G_steps = _controls_per_step(G, tree, mesh.N)
    src_steps = _per_step(backward_source, tree, mesh.N, n)

    rhs = 0.0
    for k in range(n):
        drift_data = _zero_or(f_steps[k]) + _zero_or(g_steps[k])
        noise_data = _zero_or(F_steps[k]) + _zero_or(G_steps[k])
        if not np.all(drift_data == 0.0):
            rhs += dt * _epair(mesh, drift_data, V.values[k])
        if not np.all(noise_data == 0.0):
            rhs += dt * _epair(mesh, noise_data, Z.values[k])
        if src_steps[k] is not None and not np.all(src_steps[k] == 0.0):
            rhs += dt * _epair(mesh, y.values[k], src_steps[k])
    return float(abs(lhs - rhs))


def forward_residual(spec: ProblemSpec, tree: FiltrationTree, mesh: SpatialMesh,
                     traj: Trajectory, g=None, G=None) -> float:
    """Max nodewise defect of the forward recursion; ~round-off for own output."""
    op = traj.operator or build_operator(mesh, spec.alpha, spec.eps)
    n, dt, sq = tree.n, tree.dt, tree.sqrt_dt
    a_steps = _effective_a(spec, mesh, _per_step(spec.a, tree, mesh.N, n))
    b_steps = _per_step(spec.b, tree, mesh.N, n)
    c_steps = _per_step(spec.c, tree, mesh.N, n)
    f_steps = _per_step(spec.f, tree, mesh.N, n)
    F_steps = _per_step(spec.F, tree, mesh.N, n)
    g_steps = _controls_per_step(g, tree, mesh.N)
    G_steps = _controls_per_step(G, tree, mesh.N)

    worst = 0.0
    for k in range(n):
        yk = np.broadcast_to(traj.state.values[k], (tree.node_count(k), mesh.N))
        drift = yk + dt * (convection(a_steps[k], yk, mesh.h)
                           + _term(b_steps[k], yk)
                           + _zero_or(f_steps[k]) + _zero_or(g_steps[k]))
        noise = sq * (_term(c_steps[k], yk)
                      + _zero_or(F_steps[k]) + _zero_or(G_steps[k]))
        lhs = op.apply_shifted(dt, traj.state.values[k + 1])
        worst = max(worst, float(np.max(np.abs(lhs[0::2] - (drift + noise)))),
                    float(np.max(np.abs(lhs[1::2] - (drift - noise)))))
    return worst


def backward_residual(spec: ProblemSpec, tree: FiltrationTree, mesh: SpatialMesh,
                      traj: Trajectory, source=None) -> float:
    """Max nodewise defect of the backward recursion and its (Z, V) split."""
    op = traj.operator or build_operator(mesh, spec.alpha, spec.eps)
    n, dt = tree.n, tree.dt
    a_steps = _effective_a(spec, mesh, _per_step(spec.a, tree, mesh.N, n))
    b_steps = _per_step(spec.b, tree, mesh.N, n)
    c_steps = _per_step(spec.c, tree, mesh.N, n)
    src_steps = _per_step(source, tree, mesh.N, n)

    z, V, Z = traj.state, traj.diffused_mean, traj.martingale
    worst = 0.0
    for k in range(n - 1, -1, -1):
        ch = z.values[k + 1]
        mean, slope = martingale_decomposition(ch[0::2], ch[1::2], dt)
        worst = max(worst,
                    float(np.max(np.abs(op.apply_shifted(dt, V.values[k]) - mean))),
                    float(np.max(np.abs(op.apply_shifted(dt, Z.values[k]) - slope))))
        zk = V.values[k] + dt * (convection_transpose(a_steps[k], V.values[k], mesh.h)
                                 + _term(b_steps[k], V.values[k])
                                 + _term(c_steps[k], Z.values[k])
                                 - _zero_or(src_steps[k]))
        worst = max(worst, float(np.max(np.abs(zk - z.values[k]))))
    return worst


# ---------------------------------------------------------------------------
# energy and regularization studies


@dataclass(frozen=True)
class EnergyReport:
    sup_state: float       # sup_k E ||y_k||^2
    grad_energy: float     # sum_k dt E integral (x+eps)^alpha |y_x|^2
    data_norm: float       # E ||y_0||^2 + sum_k dt E (||f||^2 + ||F||^2)
    fitted: float          # (sup_state + grad_energy) / data_norm


def energy_report(traj: Trajectory, spec: ProblemSpec, tree: FiltrationTree,
                  mesh: SpatialMesh) -> EnergyReport:
    op = traj.operator or build_operator(mesh, spec.alpha, spec.eps)
    n, dt = tree.n, tree.dt
    sup_state = max(float(mesh.l2_norm_sq(traj.state.values[k]).mean())
                    for k in range(n + 1))
    grad = sum(dt * float(op.weighted_gradient_energy(traj.state.values[k + 1]).mean())
               for k in range(n))

    f_steps = _per_step(spec.f, tree, mesh.N, n)
    F_steps = _per_step(spec.F, tree, mesh.N, n)
    data = float(mesh.l2_norm_sq(traj.state.values[0]).mean())
    for k in range(n):
        for entry in (f_steps[k], F_steps[k]):
            if entry is None:
                continue
            arr = np.atleast_2d(np.asarray(entry, dtype=float))
            if arr.shape[-1] != mesh.N:
                arr = np.broadcast_to(arr, (arr.shape[0], mesh.N))
            data += dt * float(mesh.l2_norm_sq(arr).mean())
    lhs = sup_state + grad
    fitted = 0.0 if lhs == 0.0 else (np.inf if data == 0.0 else lhs / data)
    return EnergyReport(sup_state=sup_state, grad_energy=grad,
                        data_norm=data, fitted=float(fitted))


def trajectory_distance(a: Trajectory, b: Trajectory, mesh: SpatialMesh) -> float:
    """sup over steps of E || a_k - b_k ||^2."""
    n = a.tree.n
    return max(float(mesh.l2_norm_sq(a.state.values[k] - b.state.values[k]).mean())
               for k in range(n + 1))


def epsilon_convergence(spec: ProblemSpec, tree: FiltrationTree, mesh: SpatialMesh,
                        eps_list) -> list[tuple[float, float, float]]:
    """Distances between solutions at consecutive regularization levels."""
    eps_list = list(eps_list)
    if any(e < 0 for e in eps_list):
        raise ValueError("regularization levels must be nonnegative")
    trajs = []
    for e in eps_list:
        spec_e = ProblemSpec(alpha=spec.alpha, eps=float(e), T=spec.T, a=spec.a,
                             b=spec.b, c=spec.c, f=spec.f, F=spec.F, y0=spec.y0,
                             coefficient_mode=spec.coefficient_mode)
        trajs.append(solve_forward(spec_e, tree, mesh))
    rows = []
    for (ea, ta), (eb, tb) in zip(zip(eps_list, trajs), zip(eps_list[1:], trajs[1:])):
        rows.append((float(ea), float(eb), trajectory_distance(ta, tb, mesh)))
    return rows


def trajectory_rows(traj: Trajectory) -> tuple[list[str], list[list[float]]]:
    """Flatten a trajectory for CSV export: (step, node, x-index, value)."""
    header = ["step", "node", "x_index", "value"]
    rows = []
    for k, vals in enumerate(traj.state.values):
        for m in range(vals.shape[0]):
            for j in range(vals.shape[1]):
                rows.append([k, m, j, float(vals[m, j])])
    return header, rows
