"""Weight machinery for the inequality checkers and the control construction.

Two weight families share the same spatial ingredients:

  singular kind: phi(x,t) = chi(x) psi_1(x) xi(t) + (1-chi(x)) psi_2(x) xi(t)
      with xi(t) = 1/(t^2 (T-t)^2) blowing up at both time endpoints and
      psi_i = exp(lam eta_i) - exp(2 lam M) < 0, so exp(2 s phi) vanishes as
      t -> 0, T.  Used for controllability experiments.

  regular kind: Phi(x,t) = chi Phi_1 + (1-chi) Phi_2 with
      Phi_i = exp(lam (eta_i - (lam-t)^2 + lam^2)), finite and positive on the
      whole cylinder.  Used for the source-identification experiments, where
      nothing may blow up at t = 0.

eta_1(x) = (x+eps)^beta - eps^beta is the degenerate-side profile; eta_2 is a
C^2 companion that agrees with eta_1 on the inner matching window, stays
positive inside the domain, vanishes at both endpoints, and has its only
critical point inside the localization interval.  beta must satisfy an
alpha-dependent admissibility window with explicit lower threshold beta0.

All exponents here are large: evaluators expose both linear values and the
log-scale quantities (2 s phi, log Phi) that the checkers need to work in
shifted log space.
"""

from dataclasses import dataclass, replace

import numpy as np


class ConfigurationError(ValueError):
    """A weight-system ingredient cannot be built from the given geometry."""


# ---------------------------------------------------------------------------
# admissibility of the spatial exponent


def beta0(alpha: float) -> float:
    """Lower admissibility threshold for the spatial exponent when alpha > 1.

    beta0 = max{0, 3-2a, 1-a/2, (14-9a+sqrt(17a^2-44a+36))/8}.
    """
    if not 1.0 < alpha <= 2.0:
        raise ValueError(f"beta0 is defined for alpha in (1,2], got {alpha}")
    disc = 17.0 * alpha**2 - 44.0 * alpha + 36.0
    quartic = (14.0 - 9.0 * alpha + np.sqrt(disc)) / 8.0
    return float(max(0.0, 3.0 - 2.0 * alpha, 1.0 - 0.5 * alpha, quartic))


def beta_range(alpha: float) -> tuple[float, float]:
    """Open-below/closed-above admissible window (lo, hi] for beta; beta=1 forced at alpha=1."""
    if not 0.0 < alpha < 2.0:
        raise ValueError(f"alpha must lie in (0,2), got {alpha}")
    if alpha == 1.0:
        return (1.0, 1.0)
    if alpha < 1.0:
        return (1.0, 2.0 - alpha)
    return (beta0(alpha), 2.0 - alpha)


@dataclass(frozen=True)
class BetaAdmissibility:
    ok: bool
    lo: float
    hi: float
    # Young-inequality margin: lhs < rhs must hold for the gradient absorption
    # to go through; skipped (None) at alpha = 1 where the coupling vanishes.
    margin_lhs: float | None
    margin_rhs: float | None

    def __bool__(self) -> bool:
        return self.ok


def beta_admissible(alpha: float, beta: float) -> BetaAdmissibility:
    """Check the exponent window plus the quantitative absorption margin."""
    lo, hi = beta_range(alpha)
    if alpha == 1.0:
        ok = beta == 1.0
        return BetaAdmissibility(ok, lo, hi, None, None)
    ok = lo < beta <= hi

    margin_lhs = margin_rhs = None
    if ok and alpha != 1.0:
        c1 = beta * (alpha + beta - 1.0) * (2.0 - alpha - beta)
        denom = 3.0 - 2.0 * alpha - beta
        if denom != 0.0:
            c2 = 4.0 / denom**2
            eps1 = 1.0 / abs(denom)
            margin_lhs = eps1 * c1 + c1 * c2 / (4.0 * eps1)
            margin_rhs = (alpha + 2.0 * beta - 2.0) * beta
            ok = margin_lhs < margin_rhs
    return BetaAdmissibility(ok, lo, hi, margin_lhs, margin_rhs)


# ---------------------------------------------------------------------------
# time factor


def xi(t, T: float):
    """Blow-up factor 1/(t^2 (T-t)^2); defined for 0 < t < T only."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0.0) or np.any(t >= T):
        raise ValueError("time factor is singular outside 0 < t < T")
    val = 1.0 / (t**2 * (T - t) ** 2)
    return float(val) if val.ndim == 0 else val


def _xi_clamped(t, T: float):
    """xi extended by +inf at the endpoints (the weights clamp it away)."""
    t = np.asarray(t, dtype=float)
    out = np.full(t.shape, np.inf)
    inside = (t > 0.0) & (t < T)
    ti = t[inside]
    out[inside] = 1.0 / (ti**2 * (T - ti) ** 2)
    return out


# ---------------------------------------------------------------------------
# C^2 building blocks


class QuinticPiece:
    """Quintic on [a,b] interpolating value/slope/curvature at both ends."""

    def __init__(self, a, b, left: tuple[float, float, float],
                 right: tuple[float, float, float]):
        w = b - a
        if w <= 0:
            raise ConfigurationError(f"empty interval [{a}, {b}]")
        v0, d0, c0 = left
        v1, d1, c1 = right
        lead = np.array([v0, d0, 0.5 * c0])
        mat = np.array([
            [w**3, w**4, w**5],
            [3 * w**2, 4 * w**3, 5 * w**4],
            [6 * w, 12 * w**2, 20 * w**3],
        ])
        rhs = np.array([
            v1 - (v0 + d0 * w + 0.5 * c0 * w**2),
            d1 - (d0 + c0 * w),
            c1 - c0,
        ])
        tail = np.linalg.solve(mat, rhs)
        self.a, self.b = float(a), float(b)
        self.coef = np.concatenate([lead, tail])

    def value(self, x):
        u = np.asarray(x, dtype=float) - self.a
        return sum(c * u**i for i, c in enumerate(self.coef))

    def deriv(self, x):
        u = np.asarray(x, dtype=float) - self.a
        return sum(i * c * u ** (i - 1) for i, c in enumerate(self.coef) if i >= 1)

    def second(self, x):
        u = np.asarray(x, dtype=float) - self.a
        return sum(i * (i - 1) * c * u ** (i - 2)
                   for i, c in enumerate(self.coef) if i >= 2)


class CutOff:
    """C^2 cut-off: 1 on (0, x_lo], quintic descent, 0 on [x_hi, 1)."""

    def __init__(self, x_lo: float, x_hi: float):
        if not 0.0 < x_lo < x_hi < 1.0:
            raise ConfigurationError(
                f"cut-off knots must satisfy 0 < {x_lo} < {x_hi} < 1")
        self.x_lo = x_lo
        self.x_hi = x_hi
        self.width = x_hi - x_lo

    def _u(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.x_lo) / self.width, 0.0, 1.0)

    def value(self, x):
        u = self._u(x)
        return 1.0 - (10.0 * u**3 - 15.0 * u**4 + 6.0 * u**5)

    def deriv(self, x):
        u = self._u(x)
        inside = (u > 0.0) & (u < 1.0)
        return np.where(inside, -(30.0 * u**2 - 60.0 * u**3 + 30.0 * u**4) / self.width, 0.0)

    def second(self, x):
        u = self._u(x)
        inside = (u > 0.0) & (u < 1.0)
        return np.where(inside, -(60.0 * u - 180.0 * u**2 + 120.0 * u**3) / self.width**2, 0.0)


class Eta1:
    """Monotone degenerate-side profile (x+eps)^beta - eps^beta."""

    def __init__(self, beta: float, eps: float):
        self.beta = beta
        self.eps = eps

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return (x + self.eps) ** self.beta - self.eps**self.beta

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        return self.beta * (x + self.eps) ** (self.beta - 1.0)

    def second(self, x):
        x = np.asarray(x, dtype=float)
        return self.beta * (self.beta - 1.0) * (x + self.eps) ** (self.beta - 2.0)


class Eta2:
    """Companion profile: positive inside the domain, vanishing at both ends
    with nonzero slope, equal to eta_1 on the matching window, and a single
    hump inside the localization interval."""

    def __init__(self, eta1: Eta1, x_match: tuple[float, float], peak: float,
                 pieces):
        self.eta1 = eta1
        self.x_match = x_match
        self.peak = peak
        self.pieces = pieces  # (left, rise, fall) quintics

    def value(self, x):
        x = np.asarray(x, dtype=float)
        left, rise, fall = self.pieces
        lo, hi = self.x_match
        return np.select(
            [x < lo, x <= hi, x <= self.peak],
            [left.value(x), self.eta1.value(x), rise.value(x)],
            default=fall.value(x),
        )

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        left, rise, fall = self.pieces
        lo, hi = self.x_match
        return np.select(
            [x < lo, x <= hi, x <= self.peak],
            [left.deriv(x), self.eta1.deriv(x), rise.deriv(x)],
            default=fall.deriv(x),
        )


def build_eta2(beta: float, eps: float, omega1: tuple[float, float],
               omega2: tuple[float, float], grid: int = 2001) -> Eta2:
    """Construct the companion profile and verify its defining properties.

    Three quintic pieces around the matching window, where the profile is
    eta_1 itself: a left run from (0, 0) with strictly positive slope (eta_1
    is flat at 0 once eps = 0 and beta > 1, so the left piece cannot just
    copy it), a rise to a hump at the midpoint of (omega2 upper end, omega1
    upper end), and a descent to (1, 0) with strictly negative endpoint
    slope.  Each joint matches value, slope and curvature.  Positivity and
    one-hump monotonicity are asserted on a fine grid rather than proved
    symbolically.
    """
    x11, x21 = omega1
    x12, x22 = omega2
    if not 0.0 < x11 < x12 < x22 < x21 < 1.0:
        raise ConfigurationError(
            f"need 0 < {x11} < {x12} < {x22} < {x21} < 1 for nesting")

    eta1 = Eta1(beta, eps)
    v1, s1, c1 = (float(eta1.value(x12)), float(eta1.deriv(x12)),
                  float(eta1.second(x12)))
    left = QuinticPiece(0.0, x12, (0.0, v1 / x12, 0.0), (v1, s1, c1))

    peak = 0.5 * (x22 + x21)
    v2, s2, c2 = (float(eta1.value(x22)), float(eta1.deriv(x22)),
                  float(eta1.second(x22)))
    if s2 <= 0.0:
        raise ConfigurationError("profile slope must be positive at the glue point")
    delta = peak - x22
    hump = v2 + 0.5 * s2 * delta
    kappa = -s2 / delta
    rise = QuinticPiece(x22, peak, (v2, s2, c2), (hump, 0.0, kappa))
    fall = QuinticPiece(peak, 1.0, (hump, 0.0, kappa),
                        (0.0, -2.0 * hump / (1.0 - peak), 0.0))
    eta2 = Eta2(eta1, (x12, x22), peak, (left, rise, fall))

    xs = np.linspace(0.0, 1.0, grid)
    inner = xs[(xs > 1e-4) & (xs < 1.0 - 1e-4)]
    if np.min(eta2.value(inner)) <= 0.0:
        raise ConfigurationError("companion profile is not positive inside the domain")
    outside = xs[(xs <= x11) | (xs >= x21)]
    if np.min(np.abs(eta2.deriv(outside))) <= 0.0:
        raise ConfigurationError(
            "companion profile has a flat point outside the localization interval")
    d = eta2.deriv(inner)
    tol = 1e-12 * float(np.max(np.abs(d)))
    signs = np.where(d > tol, 1, np.where(d < -tol, -1, 0))
    nonzero = np.flatnonzero(signs != 0)
    flips = [i for a, i in zip(nonzero, nonzero[1:])
             if signs[a] != signs[i]]
    if len(flips) != 1 or not (x22 < inner[flips[0]] < x21):
        raise ConfigurationError(
            f"expected exactly one critical point in ({x22}, {x21}), "
            f"found sign flips at {inner[flips] if flips else 'none'}")
    return eta2


# ---------------------------------------------------------------------------
# the assembled weight system


@dataclass
class WeightSystem:
    kind: str                      # 'singular' | 'regular'
    beta: float
    lam: float
    s: float
    eps: float
    M: float
    T: float
    omega: tuple[float, float]
    omega1: tuple[float, float]
    omega2: tuple[float, float]
    chi: CutOff
    eta1: Eta1
    eta2: Eta2

    def with_params(self, s: float | None = None, lam: float | None = None,
                    kind: str | None = None) -> "WeightSystem":
        """Cheap variant for parameter sweeps; profiles and M are shared."""
        return replace(self,
                       s=self.s if s is None else float(s),
                       lam=self.lam if lam is None else float(lam),
                       kind=self.kind if kind is None else kind)

    # -- spatial factors ----------------------------------------------------

    def psi(self, x, which: int):
        eta = self.eta1.value(x) if which == 1 else self.eta2.value(x)
        return np.exp(self.lam * eta) - np.exp(2.0 * self.lam * self.M)

    def psi_composite(self, x):
        c = self.chi.value(x)
        return c * self.psi(x, 1) + (1.0 - c) * self.psi(x, 2)

    # -- singular weight ----------------------------------------------------

    def phi(self, x, t):
        """Composite singular weight; -inf at the time endpoints."""
        xv = _xi_clamped(t, self.T)
        psi = self.psi_composite(x)
        with np.errstate(invalid="ignore"):
            out = psi * xv            # psi < 0, xi -> inf: -inf at endpoints
        return out

    def log_singular(self, x, t):
        """2 s phi(x,t), the log of the singular weight."""
        return 2.0 * self.s * self.phi(x, t)

    def singular_weight(self, x, t):
        if self.kind != "singular":
            raise ValueError("weight system was built as 'regular'")
        phi = self.phi(x, t)
        return phi, np.exp(2.0 * self.s * phi)

    # -- regular weight -----------------------------------------------------

    def varrho(self, x, t, which: int):
        eta = self.eta1.value(x) if which == 1 else self.eta2.value(x)
        t = np.asarray(t, dtype=float)
        return eta - (self.lam - t) ** 2 + self.lam**2

    def Phi(self, x, t):
        c = self.chi.value(x)
        return (c * np.exp(self.lam * self.varrho(x, t, 1))
                + (1.0 - c) * np.exp(self.lam * self.varrho(x, t, 2)))

    def log_Phi(self, x, t):
        """log Phi via a two-term log-sum-exp, safe for large lam."""
        c = self.chi.value(x)
        a1 = self.lam * self.varrho(x, t, 1)
        a2 = self.lam * self.varrho(x, t, 2)
        with np.errstate(divide="ignore"):
            l1 = np.log(c) + a1
            l2 = np.log(1.0 - c) + a2
        return np.logaddexp(l1, l2)

    def regular_weight(self, x, t):
        if self.kind != "regular":
            raise ValueError("weight system was built as 'singular'")
        Phi = self.Phi(x, t)
        with np.errstate(over="ignore"):
            return Phi, np.exp(2.0 * self.s * Phi)


def build_weight_system(kind: str, beta: float, lam: float, s: float,
                        eps: float, T: float,
                        omega: tuple[float, float],
                        omega1: tuple[float, float],
                        omega2: tuple[float, float],
                        margin: float = 1.01,
                        grid: int = 2001) -> WeightSystem:
    """Assemble the weight system and enforce its structural invariants."""
    if kind not in ("singular", "regular"):
        raise ValueError(f"kind must be 'singular' or 'regular', got {kind!r}")
    x1, x2 = omega
    x11, x21 = omega1
    x12, x22 = omega2
    if not (0.0 < x1 < x11 < x12 < x22 < x21 < x2 < 1.0):
        raise ConfigurationError(
            "intervals must nest strictly: "
            f"0 < {x1} < {x11} < {x12} < {x22} < {x21} < {x2} < 1")
    if s <= 0.0 or lam <= 0.0:
        raise ConfigurationError("weight parameters s and lambda must be positive")
    if margin < 1.0:
        raise ConfigurationError("margin below 1 cannot dominate the profiles")

    eta1 = Eta1(beta, eps)
    eta2 = build_eta2(beta, eps, omega1, omega2, grid=grid)
    chi = CutOff(x12, x22)

    xs = np.linspace(0.0, 1.0, grid)
    sup = max(float(np.max(np.abs(eta1.value(xs)))),
              float(np.max(np.abs(eta2.value(xs)))))
    M = margin * sup

    system = WeightSystem(kind=kind, beta=float(beta), lam=float(lam),
                          s=float(s), eps=float(eps), M=M, T=float(T),
                          omega=omega, omega1=omega1, omega2=omega2,
                          chi=chi, eta1=eta1, eta2=eta2)
    worst = max(float(np.max(system.psi(xs, 1))), float(np.max(system.psi(xs, 2))))
    if worst >= 0.0:
        raise ConfigurationError("psi must stay strictly negative; increase the margin")
    return system


def export_weight_table(system: WeightSystem, xs: np.ndarray,
                        ts: np.ndarray) -> tuple[list[str], list[list[float]]]:
    """Tabulate the weight on a grid: columns x, t, weight value, exp factor."""
    header = ["x", "t",
              "phi" if system.kind == "singular" else "Phi",
              "exp_2s_weight"]
    rows = []
    for t in ts:
        if system.kind == "singular":
            val, w = system.singular_weight(xs, np.full_like(xs, t))
        else:
            val, w = system.regular_weight(xs, np.full_like(xs, t))
        val = np.atleast_1d(val)
        w = np.atleast_1d(w)
        for j, x in enumerate(xs):
            rows.append([float(x), float(t), float(val[j]), float(w[j])])
    return header, rows
