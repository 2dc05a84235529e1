"""Penalized construction of adapted null controls.

The control problem: steer the forward state from y0 toward zero at the
horizon with a drift control g supported on the observation interval and a
diffusion control G on all of I, minimizing

    J(g, G) = 1/2 [ int s^-3 xi^-3 |g|^2 e^{-2 s phi}  (over the interval)
                  + int s^-2 xi^-2 |G|^2 e^{-2 s phi}
                  + (1/tau) E || y(T) ||^2 ].

The inverse weights force both controls to vanish toward the time endpoints,
so the control degrees of freedom live on the interior steps.  Substituting
g = w_g ghat, G = w_G Ghat with w = (weight)^{-1/2} turns J into

    1/2 ( ||ghat||^2 + ||Ghat||^2 + (1/tau) ||y_free(T) + Psi(ghat, Ghat)||^2 ),

an identity-plus-Gramian quadratic whose normal equations are solved by
plain conjugate gradients; every operator application is one forward sweep
plus one exact-adjoint backward sweep.  At the optimum the controls satisfy

    g = -s^3 xi^3 V_p e^{2 s phi} on the interval,   G = -s^2 xi^2 P e^{2 s phi},

where (V_p, P) is the backward solve from terminal datum y(T)/tau; the
reported optimality residual measures this identity in the weighted control
norm and converges together with CG.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import SpatialMesh
from .solvers import ProblemSpec, Trajectory, solve_backward, solve_forward
from .tree import FiltrationTree
from .weights import WeightSystem


@dataclass
class HumConfig:
    tau: float
    system: WeightSystem            # singular kind; shares eps with the equation
    s: float = 4.0
    lam: float = 2.0
    cg_max: int = 400
    cg_tol: float = 1e-8

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError(f"penalization parameter must be positive, got {self.tau}")
        if not 0.0 < self.cg_tol < 1.0:
            raise ValueError(f"CG tolerance must lie in (0,1), got {self.cg_tol}")
        if self.system.kind != "singular":
            raise ValueError("the control construction needs the singular weight")

    @property
    def eps(self) -> float:
        return self.system.eps


@dataclass
class ControlPair:
    """Adapted control pair; g vanishes outside its interval by construction."""

    g: list
    G: list
    omega: tuple[float, float]

    def check_support(self, mesh: SpatialMesh) -> bool:
        outside = ~mesh.cell_mask(self.omega)
        return all(float(np.max(np.abs(gk[:, outside]))) == 0.0 if np.any(outside)
                   else True for gk in self.g)


@dataclass
class HumDiagnostics:
    iterations: int
    converged: bool
    functional: float
    terminal_energy: float
    weighted_cost: float
    optimality_residual: float
    residual_history: list = field(default_factory=list)
    functional_history: list = field(default_factory=list)


def control_weight_arrays(system: WeightSystem, tree: FiltrationTree,
                          mesh: SpatialMesh):
    """Per-step multipliers w_g, w_G turning hat variables into controls.

    w_g = s^{3/2} xi^{3/2} e^{s phi} restricted to the control interval,
    w_G = s xi e^{s phi}; both are exactly zero at step 0, where the blow-up
    of the inverse weight forbids any control action.
    """
    s = system.s
    times = tree.times
    mask = mesh.cell_mask(system.omega).astype(float)
    psi = system.psi_composite(mesh.centers)
    wg, wG = [], []
    for k in range(tree.n):
        if k == 0:
            wg.append(np.zeros(mesh.N))
            wG.append(np.zeros(mesh.N))
            continue
        x = 1.0 / (times[k] ** 2 * (tree.T - times[k]) ** 2)
        e = np.exp(s * psi * x)
        wg.append(s**1.5 * x**1.5 * e * mask)
        wG.append(s * x * e)
    return wg, wG


class _ControlVector:
    """Pair of per-step arrays with the weighted-time inner product."""

    __slots__ = ("g", "G")

    def __init__(self, g, G):
        self.g = g
        self.G = G

    @classmethod
    def zeros(cls, tree, N):
        return cls([np.zeros((tree.node_count(k), N)) for k in range(tree.n)],
                   [np.zeros((tree.node_count(k), N)) for k in range(tree.n)])

    def axpy(self, alpha, other):
        for k in range(len(self.g)):
            self.g[k] += alpha * other.g[k]
            self.G[k] += alpha * other.G[k]

    def scale_add(self, beta, other):
        """self = other + beta * self (CG direction update)."""
        for k in range(len(self.g)):
            self.g[k] = other.g[k] + beta * self.g[k]
            self.G[k] = other.G[k] + beta * self.G[k]

    def copy(self):
        return _ControlVector([a.copy() for a in self.g],
                              [a.copy() for a in self.G])


def _dot(tree: FiltrationTree, mesh: SpatialMesh, u: _ControlVector,
         v: _ControlVector) -> float:
    total = 0.0
    for k in range(tree.n):
        m = u.g[k].shape[0]
        total += (u.g[k] * v.g[k]).sum() / m + (u.G[k] * v.G[k]).sum() / m
    return tree.dt * mesh.h * total


def hum_solve(spec: ProblemSpec, tree: FiltrationTree, mesh: SpatialMesh,
              y0: np.ndarray, config: HumConfig
              ) -> tuple[ControlPair, Trajectory, HumDiagnostics]:
    """Minimize the penalized functional over adapted control pairs."""
    if not np.isclose(config.eps, spec.eps):
        raise ValueError(
            f"weight regularization {config.eps} differs from the equation's {spec.eps}")
    if not (spec.a is None or np.all(np.asarray(spec.a) == 0.0)) \
            and not 0.0 < spec.alpha < 0.5:
        raise ValueError(
            "convection requires alpha in (0, 1/2) for the control construction")
    system = config.system.with_params(s=config.s, lam=config.lam)
    wg, wG = control_weight_arrays(system, tree, mesh)
    n, N = tree.n, mesh.N
    tau = config.tau

    spec_data = replace(spec, y0=np.asarray(y0, dtype=float))
    spec_hom = replace(spec, y0=None, f=None, F=None)

    def lift(x: _ControlVector):
        return ([wg[k] * x.g[k] for k in range(n)],
                [wG[k] * x.G[k] for k in range(n)])

    def gramian(x: _ControlVector) -> tuple[_ControlVector, Trajectory]:
        g, G = lift(x)
        y = solve_forward(spec_hom, tree, mesh, g=g, G=G)
        p = solve_backward(spec, tree, mesh, y.state.values[n] / tau)
        out = _ControlVector(
            [x.g[k] + wg[k] * p.diffused_mean.values[k] for k in range(n)],
            [x.G[k] + wG[k] * p.martingale.values[k] for k in range(n)])
        return out, y

    y_free = solve_forward(spec_data, tree, mesh)
    p_free = solve_backward(spec, tree, mesh, y_free.state.values[n] / tau)
    b = _ControlVector([-wg[k] * p_free.diffused_mean.values[k] for k in range(n)],
                       [-wG[k] * p_free.martingale.values[k] for k in range(n)])

    free_terminal = float(mesh.l2_norm_sq(y_free.state.values[n]).mean())
    x = _ControlVector.zeros(tree, N)
    ax = _ControlVector.zeros(tree, N)
    r = b.copy()
    p_dir = r.copy()
    rho = _dot(tree, mesh, r, r)
    b_norm = np.sqrt(rho)
    history = [1.0 if b_norm > 0 else 0.0]
    functional_history = [0.5 * free_terminal / tau]
    iterations = 0
    converged = b_norm == 0.0

    while not converged and iterations < config.cg_max:
        q, _ = gramian(p_dir)
        alpha = rho / _dot(tree, mesh, p_dir, q)
        x.axpy(alpha, p_dir)
        ax.axpy(alpha, q)
        r.axpy(-alpha, q)
        rho_new = _dot(tree, mesh, r, r)
        iterations += 1
        history.append(float(np.sqrt(rho_new) / b_norm))
        # J along CG iterates: 1/2 x.Ax - b.x + const; non-increasing in exact
        # arithmetic since CG minimizes over growing Krylov subspaces.
        functional_history.append(
            0.5 * _dot(tree, mesh, x, ax) - _dot(tree, mesh, b, x)
            + 0.5 * free_terminal / tau)
        if np.sqrt(rho_new) <= config.cg_tol * b_norm:
            converged = True
        beta = rho_new / rho
        rho = rho_new
        p_dir.scale_add(beta, r)

    g, G = lift(x)
    controls = ControlPair(g=g, G=G, omega=system.omega)
    y = solve_forward(spec_data, tree, mesh, g=g, G=G)
    p = solve_backward(spec, tree, mesh, y.state.values[n] / tau)
    grad = _ControlVector(
        [x.g[k] + wg[k] * p.diffused_mean.values[k] for k in range(n)],
        [x.G[k] + wG[k] * p.martingale.values[k] for k in range(n)])
    x_norm = np.sqrt(_dot(tree, mesh, x, x))
    opt_res = np.sqrt(_dot(tree, mesh, grad, grad)) / max(x_norm, b_norm, 1e-300)

    cost = _dot(tree, mesh, x, x)
    terminal = float(mesh.l2_norm_sq(y.state.values[n]).mean())
    diag = HumDiagnostics(
        iterations=iterations,
        converged=converged,
        functional=0.5 * (cost + terminal / tau),
        terminal_energy=terminal,
        weighted_cost=cost,
        optimality_residual=float(opt_res),
        residual_history=history,
        functional_history=functional_history,
    )
    return controls, y, diag


def decay_study(spec: ProblemSpec, tree: FiltrationTree, mesh: SpatialMesh,
                y0: np.ndarray, taus, config: HumConfig) -> dict:
    """Terminal energy and weighted cost along a decreasing penalization grid."""
    taus = list(taus)
    if any(t2 >= t1 for t1, t2 in zip(taus, taus[1:])):
        raise ValueError("penalization grid must decrease strictly")
    spec_data = replace(spec, y0=np.asarray(y0, dtype=float))
    uncontrolled = solve_forward(spec_data, tree, mesh)
    base = float(mesh.l2_norm_sq(uncontrolled.state.values[tree.n]).mean())
    initial = float(mesh.l2_norm_sq(np.atleast_2d(y0)).mean())
    rows = []
    for tau in taus:
        cfg = replace(config, tau=tau)
        _, _, diag = hum_solve(spec, tree, mesh, y0, cfg)
        rows.append({
            "tau": tau,
            "terminal_energy": diag.terminal_energy,
            "weighted_cost": diag.weighted_cost,
            "cost_over_initial": diag.weighted_cost / initial if initial > 0 else 0.0,
            "iterations": diag.iterations,
            "optimality_residual": diag.optimality_residual,
            "converged": diag.converged,
        })
    return {"uncontrolled_terminal": base, "initial_energy": initial, "rows": rows}


def control_distance(a: ControlPair, b: ControlPair, tree: FiltrationTree,
                     mesh: SpatialMesh) -> float:
    """Plain (unweighted) control-space distance used by the limit studies."""
    total = 0.0
    for k in range(tree.n):
        dg = a.g[k] - b.g[k]
        dG = a.G[k] - b.G[k]
        total += (dg * dg).sum(axis=-1).mean() + (dG * dG).sum(axis=-1).mean()
    return float(np.sqrt(tree.dt * mesh.h * total))


def epsilon_uniformity_study(spec: ProblemSpec, tree: FiltrationTree,
                             mesh: SpatialMesh, y0: np.ndarray, eps_grid,
                             config: HumConfig,
                             system_builder=None) -> dict:
    """Control pairs along a vanishing regularization grid and their
    consecutive distances, which must shrink as the pair of levels does."""
    eps_grid = list(eps_grid)
    if any(e2 >= e1 for e1, e2 in zip(eps_grid, eps_grid[1:])):
        raise ValueError("regularization grid must decrease strictly")
    if system_builder is None:
        from .weights import build_weight_system

        def system_builder(eps):
            base = config.system
            return build_weight_system("singular", base.beta, base.lam, base.s,
                                       eps, base.T, base.omega, base.omega1,
                                       base.omega2)

    pairs = []
    for e in eps_grid:
        spec_e = replace(spec, eps=float(e))
        cfg_e = replace(config, system=system_builder(float(e)))
        controls, _, diag = hum_solve(spec_e, tree, mesh, y0, cfg_e)
        pairs.append((float(e), controls, diag))
    rows = []
    for (e1, c1, _), (e2, c2, _) in zip(pairs, pairs[1:]):
        rows.append({"eps_hi": e1, "eps_lo": e2,
                     "distance": control_distance(c1, c2, tree, mesh)})
    return {"levels": [p[0] for p in pairs], "rows": rows,
            "diagnostics": [p[2] for p in pairs]}
