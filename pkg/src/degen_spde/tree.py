"""Binary filtration tree with exact expectations.

Time is discretized into n steps of size dt = T/n.  At each step every node
branches into two children; the edge to the even child carries the increment
+sqrt(dt), the edge to the odd child carries -sqrt(dt).  All 2^n leaves have
weight 2^-n, so expectations, conditional expectations and martingale
decompositions are finite sums evaluated exactly, and adaptedness of a field
is structural: its value at step k is indexed by the node at step k.
"""

from dataclasses import dataclass

import numpy as np

DEFAULT_DEPTH_CAP = 14


class TreeDepthError(ValueError):
    """Requested depth would allocate more than 2^cap leaves."""


@dataclass(frozen=True)
class FiltrationTree:
    """Dyadic time grid plus the implicit binary node structure."""

    n: int
    T: float
    dt: float
    sqrt_dt: float

    def node_count(self, k: int) -> int:
        if not 0 <= k <= self.n:
            raise IndexError(f"step {k} outside 0..{self.n}")
        return 1 << k

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n + 1)

    def increment_signs(self, k: int) -> np.ndarray:
        """Signs of the edge increments into step k+1, indexed by child node."""
        m = self.node_count(k + 1)
        signs = np.ones(m)
        signs[1::2] = -1.0
        return signs


def build_tree(n: int, T: float, cap: int = DEFAULT_DEPTH_CAP) -> FiltrationTree:
    if n < 1:
        raise ValueError(f"need at least one step, got n={n}")
    if T <= 0:
        raise ValueError(f"horizon must be positive, got T={T}")
    if n > cap:
        raise TreeDepthError(
            f"depth {n} needs 2^{n} = {2 ** n} leaves, over the configured "
            f"cap of 2^{cap} = {2 ** cap}; raise the cap explicitly if the "
            f"memory is really available"
        )
    dt = T / n
    return FiltrationTree(n=n, T=float(T), dt=dt, sqrt_dt=np.sqrt(dt))


class AdaptedField:
    """Space-time field indexed by (step, node): values[k] has shape (2^k, width).

    Storing one flat array per step makes adaptedness structural and keeps
    per-step sweeps contiguous.
    """

    def __init__(self, tree: FiltrationTree, values: list[np.ndarray]):
        if not values:
            raise ValueError("empty field")
        width = np.atleast_2d(values[0]).shape[-1]
        vals = []
        for k, v in enumerate(values):
            v = np.atleast_2d(np.asarray(v, dtype=float))
            if v.shape != (tree.node_count(k), width):
                raise ValueError(
                    f"step {k}: expected shape {(tree.node_count(k), width)}, "
                    f"got {v.shape}"
                )
            vals.append(v)
        self.tree = tree
        self.values = vals
        self.width = width

    @classmethod
    def zeros(cls, tree: FiltrationTree, width: int, last_step: int | None = None):
        last = tree.n if last_step is None else last_step
        return cls(tree, [np.zeros((tree.node_count(k), width))
                          for k in range(last + 1)])

    @property
    def last_step(self) -> int:
        return len(self.values) - 1

    def expectation(self, k: int) -> np.ndarray:
        """Exact mean over the 2^k equally weighted nodes at step k."""
        if not 0 <= k <= self.last_step:
            raise IndexError(f"step {k} outside 0..{self.last_step}")
        # numpy reduces pairwise, which keeps the sum associative enough to
        # merge partial reductions from parallel workers.
        return self.values[k].mean(axis=0)

    def second_moment(self, k: int) -> np.ndarray:
        if not 0 <= k <= self.last_step:
            raise IndexError(f"step {k} outside 0..{self.last_step}")
        v = self.values[k]
        return (v * v).mean(axis=0)


def expectation(field: AdaptedField, k: int) -> np.ndarray:
    return field.expectation(k)


def martingale_decomposition(v_plus: np.ndarray, v_minus: np.ndarray,
                             dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Split a pair of child values into (conditional mean, martingale slope).

    The children reconstruct exactly as mean +- slope*sqrt(dt).
    """
    v_plus = np.asarray(v_plus, dtype=float)
    v_minus = np.asarray(v_minus, dtype=float)
    mean = 0.5 * (v_plus + v_minus)
    slope = (v_plus - v_minus) / (2.0 * np.sqrt(dt))
    return mean, slope


def reconstruct_children(mean: np.ndarray, slope: np.ndarray,
                         dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of martingale_decomposition."""
    step = np.sqrt(dt) * np.asarray(slope, dtype=float)
    return mean + step, mean - step


def split_children(child_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Views of the + and - children out of a step-(k+1) node array."""
    return child_values[0::2], child_values[1::2]


def discrete_brownian(tree: FiltrationTree) -> AdaptedField:
    """Cumulative increment sums: the tree's copy of the driving noise."""
    values = [np.zeros((1, 1))]
    for k in range(tree.n):
        prev = values[-1]
        nxt = np.empty((tree.node_count(k + 1), 1))
        nxt[0::2] = prev + tree.sqrt_dt
        nxt[1::2] = prev - tree.sqrt_dt
        values.append(nxt)
    return AdaptedField(tree, values)


def stochastic_integral(tree: FiltrationTree, integrand: AdaptedField) -> AdaptedField:
    """Running sum of integrand[k] * dB over the tree's edges.

    The integrand must be defined on steps 0..n-1; adaptedness (value used on
    the edge out of step k is the step-k value) is automatic from the layout.
    """
    if integrand.last_step < tree.n - 1:
        raise ValueError("integrand must cover steps 0..n-1")
    values = [np.zeros((1, integrand.width))]
    for k in range(tree.n):
        prev = values[-1]
        zk = integrand.values[k]
        nxt = np.empty((tree.node_count(k + 1), integrand.width))
        nxt[0::2] = prev + zk * tree.sqrt_dt
        nxt[1::2] = prev - zk * tree.sqrt_dt
        values.append(nxt)
    return AdaptedField(tree, values)


def ito_isometry_residual(tree: FiltrationTree, integrand: AdaptedField) -> float:
    """Max deviation of E[(∫ Z dB)^2] from sum_k E[Z_k^2] dt; 0 up to round-off."""
    total = stochastic_integral(tree, integrand)
    lhs = total.second_moment(tree.n)
    rhs = sum(integrand.second_moment(k) * tree.dt for k in range(tree.n))
    return float(np.max(np.abs(lhs - rhs)))
