"""Spatial mesh and the degenerate diffusion operator on I = (0,1).

The operator z -> ((x+eps)^alpha z_x)_x is discretized by finite volumes on a
uniform mesh of N cells: the diffusion coefficient is evaluated at cell
faces, which keeps it finite (and exactly zero at x=0 when eps=0) and makes
the matrix symmetric.  Boundary conditions follow the degeneracy exponent:

  alpha in (0,1): homogeneous Dirichlet at x=0 (ghost value 0),
  alpha in [1,2): zero flux through the left face,

and homogeneous Dirichlet at x=1 always.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded


@dataclass(frozen=True)
class SpatialMesh:
    """Uniform cells on (0,1): centers x_j = (j - 1/2) h, faces at j h."""

    N: int
    h: float
    centers: np.ndarray
    faces: np.ndarray

    def cell_mask(self, interval: tuple[float, float]) -> np.ndarray:
        lo, hi = interval
        return (self.centers > lo) & (self.centers < hi)

    def face_mask(self, interval: tuple[float, float]) -> np.ndarray:
        lo, hi = interval
        return (self.faces > lo) & (self.faces < hi)

    def l2_norm_sq(self, v: np.ndarray) -> np.ndarray:
        """Squared L2(I) norm(s) of cell vectors; batched over leading axes."""
        v = np.asarray(v)
        return self.h * np.sum(v * v, axis=-1)

    def inner(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.h * np.sum(np.asarray(u) * np.asarray(v), axis=-1)


def build_mesh(N: int) -> SpatialMesh:
    if N < 2:
        raise ValueError(f"need at least 2 cells, got N={N}")
    h = 1.0 / N
    centers = (np.arange(N) + 0.5) * h
    faces = np.arange(N + 1) * h
    return SpatialMesh(N=N, h=h, centers=centers, faces=faces)


class DegenerateOperator:
    """Tridiagonal finite-volume form of z -> ((x+eps)^alpha z_x)_x.

    The matrix is symmetric negative semi-definite in the plain (unweighted)
    inner product, which the solvers rely on for unconditional stability of
    the implicit step and for exact transposition in the backward sweep.
    """

    def __init__(self, mesh: SpatialMesh, alpha: float, eps: float):
        if not 0.0 < alpha < 2.0:
            raise ValueError(f"degeneracy exponent must lie in (0,2), got {alpha}")
        if eps < 0.0:
            raise ValueError(f"regularization must be nonnegative, got {eps}")
        self.mesh = mesh
        self.alpha = float(alpha)
        self.eps = float(eps)
        self.bc_regime = "dirichlet" if alpha < 1.0 else "flux"

        coef = (mesh.faces + eps) ** alpha
        if self.bc_regime == "flux":
            coef = coef.copy()
            coef[0] = 0.0  # no transport through the degenerate end
        self.face_coef = coef

        h2 = mesh.h**2
        self.off_diag = coef[1:-1] / h2                      # N-1 couplings
        self.main_diag = -(coef[:-1] + coef[1:]) / h2        # N diagonal entries
        self._chol_cache: dict[float, np.ndarray] = {}

    def apply(self, v: np.ndarray) -> np.ndarray:
        """A v for cell vectors v of shape (..., N)."""
        v = np.asarray(v, dtype=float)
        out = self.main_diag * v
        out[..., :-1] += self.off_diag * v[..., 1:]
        out[..., 1:] += self.off_diag * v[..., :-1]
        return out

    def grad_faces(self, v: np.ndarray) -> np.ndarray:
        """Face gradients of shape (..., N+1), with the ghost conventions.

        Dirichlet faces read a zero ghost one spacing away (matching the
        matrix stencil); the zero-flux face reports gradient 0 so that
        coefficient * gradient is the actual (vanishing) flux.
        """
        v = np.asarray(v, dtype=float)
        g = np.empty(v.shape[:-1] + (self.mesh.N + 1,))
        h = self.mesh.h
        g[..., 1:-1] = (v[..., 1:] - v[..., :-1]) / h
        g[..., 0] = v[..., 0] / h if self.bc_regime == "dirichlet" else 0.0
        g[..., -1] = -v[..., -1] / h
        return g

    def weighted_gradient_energy(self, v: np.ndarray) -> np.ndarray:
        """h * sum_faces coef * gradient^2 == <-A v, v>; batched."""
        g = self.grad_faces(v)
        return self.mesh.h * np.sum(self.face_coef * g * g, axis=-1)

    def dense(self) -> np.ndarray:
        a = np.diag(self.main_diag)
        a += np.diag(self.off_diag, 1) + np.diag(self.off_diag, -1)
        return a

    def shifted_cholesky(self, dt: float) -> np.ndarray:
        """Banded Cholesky factor of I - dt A, cached per dt."""
        key = float(dt)
        fac = self._chol_cache.get(key)
        if fac is None:
            ab = np.zeros((2, self.mesh.N))
            ab[0, 1:] = -dt * self.off_diag
            ab[1] = 1.0 - dt * self.main_diag
            fac = cholesky_banded(ab, lower=False)
            self._chol_cache[key] = fac
        return fac

    def solve_shifted(self, dt: float, rhs: np.ndarray) -> np.ndarray:
        """(I - dt A)^-1 rhs for rhs of shape (..., N); dt > 0."""
        fac = self.shifted_cholesky(dt)
        rhs = np.asarray(rhs, dtype=float)
        flat = rhs.reshape(-1, self.mesh.N)
        out = cho_solve_banded((fac, False), flat.T).T
        return out.reshape(rhs.shape)

    def apply_shifted(self, dt: float, v: np.ndarray) -> np.ndarray:
        """(I - dt A) v."""
        return np.asarray(v, dtype=float) - dt * self.apply(v)


def build_operator(mesh: SpatialMesh, alpha: float, eps: float) -> DegenerateOperator:
    return DegenerateOperator(mesh, alpha, eps)


@lru_cache(maxsize=None)
def _cached_mesh(N: int) -> SpatialMesh:
    return build_mesh(N)


def hardy_check(gamma: float, eps: float, z: np.ndarray) -> tuple[float, float, float]:
    """Evaluate both sides of the weighted Hardy inequality for one profile.

    z holds cell-center values of a function vanishing at both endpoints;
    the function is treated as piecewise linear through (0,0), the centers,
    and (1,0).  Returns

        lhs   = integral (x+eps)^(-gamma) z^2,
        rhs   = 4/(gamma-1)^2 * integral (x+eps)^(2-gamma) z_x^2,
        ratio = lhs / rhs  (0 when both vanish).

    The inequality asserts ratio <= 1; on the mesh it holds up to quadrature
    slack of order 1/N.
    """
    if gamma == 1.0:
        raise ValueError("gamma = 1 is excluded: the constant 4/(gamma-1)^2 blows up")
    if not (0.0 <= gamma < 1.0 or 1.0 < gamma <= 2.0):
        raise ValueError(f"gamma must lie in [0,1) or (1,2], got {gamma}")
    if eps == 0.0:
        if gamma >= 1.0:
            raise ValueError("eps = 0 requires gamma < 1")
    elif not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0,1) or be 0, got {eps}")

    z = np.asarray(z, dtype=float)
    N = z.shape[-1]
    mesh = _cached_mesh(N)
    h = mesh.h

    lhs = h * np.sum((mesh.centers + eps) ** (-gamma) * z * z)

    grad_interior = (z[1:] - z[:-1]) / h            # at interior faces
    w_interior = (mesh.faces[1:-1] + eps) ** (2.0 - gamma)
    rhs_int = h * np.sum(w_interior * grad_interior**2)
    # boundary half-cells: linear run from the zero endpoint to the first center
    gl = 2.0 * z[0] / h
    gr = -2.0 * z[-1] / h
    rhs_bnd = 0.5 * h * ((0.25 * h + eps) ** (2.0 - gamma) * gl**2
                         + (1.0 - 0.25 * h + eps) ** (2.0 - gamma) * gr**2)
    rhs = 4.0 / (gamma - 1.0) ** 2 * (rhs_int + rhs_bnd)

    ratio = 0.0 if rhs == 0.0 else lhs / rhs
    return float(lhs), float(rhs), float(ratio)


def weighted_h1_norm(z: np.ndarray, alpha: float, eps: float = 0.0,
                     zero_endpoints: bool = True) -> float:
    """Squared weighted H1 norm: integral (z^2 + (x+eps)^alpha z_x^2).

    With zero_endpoints the profile is closed by zero boundary values as in
    hardy_check; without it only interior face differences contribute
    (useful for probing constants, whose gradient term must vanish).
    """
    z = np.asarray(z, dtype=float)
    N = z.shape[-1]
    mesh = _cached_mesh(N)
    h = mesh.h

    total = h * np.sum(z * z)
    grad_interior = (z[1:] - z[:-1]) / h
    w_interior = (mesh.faces[1:-1] + eps) ** alpha
    total += h * np.sum(w_interior * grad_interior**2)
    if zero_endpoints:
        gl = 2.0 * z[0] / h
        gr = -2.0 * z[-1] / h
        total += 0.5 * h * ((0.25 * h + eps) ** alpha * gl**2
                            + (1.0 - 0.25 * h + eps) ** alpha * gr**2)
    return float(total)
