"""Pointwise certificate margins for positive invariance and escape.

Three margin functions are evaluated over V in [0, a]:

* ``lemma1_margin`` (kind "lemma1", C1 boundary): checks
  psi'(V)*[alpha(V) + beta(V)*phi(psi(V))] + delta(alpha_lower^-1(V))
  + xi(psi(V)) <= 0, the inward-flux condition across the curve
  lambda = psi(V).

* ``lemma2_margin`` (kind "lemma2", star-shaped boundary): checks
  psi(V)*[alpha(V) + beta(V)*phi(psi(V))] + V*[delta(alpha_lower^-1(V))
  + xi(psi(V))] <= 0, the condition that V/lambda is nonincreasing on
  the boundary; psi need not be differentiable but its epigraph over
  [0, a] must be star-shaped w.r.t. the origin (checked).

* ``escape_margin`` (kind "escape"): the reversed inequality on the
  shifted boundary lambda = psi(V) - epsilon; pass means the margin stays
  nonnegative, certifying that the sub-boundary region is invariant and
  its trajectories do not approach the origin.

Margins are checked on a uniform grid with one x4 refinement pass around
the extremum; an optional Lipschitz constant upgrades the claim to a
rigorous grid bound (pass requires margin <= -L*h/2).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bounds_core import BoundSet, ScalarFn, monotone_inverse_array
from .exprlang import EvalError, Var
from .star_envelope import GridFunction, is_star_shaped

__all__ = [
    "KIND_LEMMA1", "KIND_LEMMA2", "KIND_ESCAPE",
    "BoundaryCandidate", "CertificateProblem", "CertificateVerdict",
    "SmallGainData", "SmallGainResult",
    "BoundaryError", "StarShapeError",
    "lemma1_margin", "lemma2_margin", "escape_margin",
    "max_feasible_a", "smallgain_bound",
]

log = logging.getLogger(__name__)

KIND_LEMMA1 = "lemma1"
KIND_LEMMA2 = "lemma2"
KIND_ESCAPE = "escape"


class BoundaryError(ValueError):
    """Boundary function violates its class preconditions on the grid."""


class StarShapeError(ValueError):
    """Boundary epigraph not star-shaped; carries the violating (V, gamma)."""

    def __init__(self, witness):
        self.witness = witness
        super().__init__(f"epigraph not star-shaped w.r.t. the origin; "
                         f"ray test fails at (V, gamma) = {witness}")


@dataclass(frozen=True)
class BoundaryCandidate:
    """Candidate boundary lambda = psi(V).

    ``psi`` is any vectorized callable; ``dpsi`` is its derivative or None
    (central differences are used then).  ``family`` tags the construction:
    "linear" (p*V), "sqrt" (r*sqrt(V)), "expression", or "grid" (sampled
    envelope, usable with the ray-condition certificate only).
    """

    psi: object
    dpsi: object | None
    family: str
    dpsi_source: str  # "symbolic" | "finite-difference" | "closed-form"
    params: dict = field(default_factory=dict)

    @classmethod
    def linear(cls, p):
        if not p > 0:
            raise ValueError(f"slope p must be positive, got {p}")
        p = float(p)
        return cls(psi=lambda v, _p=p: _p * np.asarray(v, dtype=float),
                   dpsi=lambda v, _p=p: np.full_like(np.asarray(v, dtype=float), _p),
                   family="linear", dpsi_source="closed-form", params={"p": p})

    @classmethod
    def sqrt(cls, r):
        if not r > 0:
            raise ValueError(f"coefficient r must be positive, got {r}")
        r = float(r)

        def _psi(v, _r=r):
            with np.errstate(invalid="ignore"):
                return _r * np.sqrt(np.asarray(v, dtype=float))

        def _dpsi(v, _r=r):
            v = np.asarray(v, dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                return _r / (2.0 * np.sqrt(v))

        return cls(psi=_psi, dpsi=_dpsi, family="sqrt",
                   dpsi_source="closed-form", params={"r": r})

    @classmethod
    def from_scalar_fn(cls, fn, derivative="symbolic"):
        if derivative == "symbolic":
            d = fn.derivative()
            if d is not None:
                return cls(psi=fn, dpsi=d, family="expression",
                           dpsi_source="symbolic", params={})
        return cls(psi=fn, dpsi=None, family="expression",
                   dpsi_source="finite-difference", params={})

    @classmethod
    def from_grid(cls, grid):
        return cls(psi=grid, dpsi=None, family="grid",
                   dpsi_source="finite-difference", params={})

    def dpsi_values(self, V):
        """Derivative samples; falls back to central differences clipped to
        one-sided at the left end of the (nonnegative) domain."""
        if self.dpsi is not None:
            return np.asarray(self.dpsi(V), dtype=float)
        V = np.asarray(V, dtype=float)
        h = np.float_power(np.finfo(float).eps, 1.0 / 3.0) * np.maximum(1.0, np.abs(V))
        lo = np.maximum(V - h, 0.0)
        hi = V + h
        plo = np.asarray(self.psi(lo), dtype=float)
        phi_ = np.asarray(self.psi(hi), dtype=float)
        return (phi_ - plo) / (hi - lo)


@dataclass(frozen=True)
class CertificateProblem:
    bounds: BoundSet
    boundary: BoundaryCandidate
    a: float
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"interval cap a must be positive, got {self.a}")
        if self.a > self.bounds.v_max:
            raise ValueError(f"a={self.a} exceeds v_max={self.bounds.v_max}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")


@dataclass(frozen=True)
class CertificateVerdict:
    kind: str
    margin_max: float
    argmax_V: float
    grid_n: int
    passes: bool
    rigorous: bool = False
    notes: tuple = ()

    def as_dict(self):
        return {"kind": self.kind, "margin_max": self.margin_max,
                "argmax_V": self.argmax_V, "grid_n": self.grid_n,
                "pass": self.passes, "rigorous": self.rigorous,
                "notes": list(self.notes)}


@dataclass(frozen=True)
class SmallGainData:
    """Quadratic-Lyapunov cascade data: contraction k, |Px| <= sigma|x|,
    Lipschitz constant B of the coupling in lambda, and the V-equivalence
    constants p_lower, p_upper."""

    k: float
    sigma: float
    B: float
    p_lower: float
    p_upper: float
    gamma: float

    def __post_init__(self):
        for name in ("k", "sigma", "B", "p_lower", "p_upper", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.p_lower > self.p_upper:
            raise ValueError("p_lower must not exceed p_upper")


@dataclass(frozen=True)
class SmallGainResult:
    gamma_star: float
    r_star: float
    omega_inner_slope: float
    omega_outer_slope: float
    passes: bool

    def as_dict(self):
        return {"gamma_star": self.gamma_star, "r_star": self.r_star,
                "omega_inner_slope": self.omega_inner_slope,
                "omega_outer_slope": self.omega_outer_slope,
                "pass": self.passes}


def _odd_extension(fn, s):
    """sign(s) * fn(|s|): the monotone continuation of a class-K function to
    negative arguments (used by the escape certificate where the shifted
    boundary psi(V) - epsilon dips below zero)."""
    s = np.asarray(s, dtype=float)
    return np.sign(s) * np.asarray(fn(np.abs(s)), dtype=float)


def _inverse_values(bounds, V):
    """delta(alpha_lower^-1(V)) argument: inverse by vectorized bisection,
    short-circuited exactly when alpha_lower is the identity expression."""
    al = bounds.stable.alpha_lower
    if isinstance(al, ScalarFn) and isinstance(al.expr, Var) and al.expr.name == al.var:
        return np.asarray(V, dtype=float)
    return monotone_inverse_array(al, V, hi=bounds.v_max)


def _margin_values(prob, kind, V):
    st = prob.bounds.stable
    un = prob.bounds.unstable
    psi_V = np.asarray(prob.boundary.psi(V), dtype=float)
    inv = _inverse_values(prob.bounds, V)
    delta_term = np.asarray(un.delta(inv), dtype=float)

    if kind == KIND_ESCAPE:
        arg = psi_V - prob.epsilon
        phi_term = _odd_extension(st.phi, arg)
        xi_term = _odd_extension(un.xi, arg)
    else:
        phi_term = np.asarray(st.phi(psi_V), dtype=float)
        xi_term = np.asarray(un.xi(psi_V), dtype=float)

    bracket = np.asarray(st.alpha(V), dtype=float) \
        + np.asarray(st.beta(V), dtype=float) * phi_term

    if kind == KIND_LEMMA2:
        G = psi_V * bracket + V * (delta_term + xi_term)
    else:
        dpsi = prob.boundary.dpsi_values(V)
        with np.errstate(invalid="ignore"):
            core = dpsi * bracket
        # an unbounded slope at V=0 against a vanishing bracket is the
        # class-K limit 0, not nan
        core = np.where(np.isinf(dpsi) & (bracket == 0.0), 0.0, core)
        G = core + delta_term + xi_term

    if not np.all(np.isfinite(G)):
        bad = V[~np.isfinite(G)]
        raise EvalError(f"certificate margin not finite at V={bad[:4]!r}")
    return G, psi_V


def _check_boundary(prob, kind, V, psi_V):
    if kind == KIND_LEMMA2:
        res = is_star_shaped(prob.boundary.psi, prob.a)
        if not res.passes:
            raise StarShapeError(res.witness)
        if abs(float(prob.boundary.psi(0.0))) > 1e-12:
            raise BoundaryError("psi(0) must be 0")
        return
    if abs(float(psi_V[0])) > 1e-12 and V[0] == 0.0:
        raise BoundaryError(f"psi(0) = {float(psi_V[0])!r}, expected 0")
    if not np.all(np.diff(psi_V) > 0):
        raise BoundaryError("psi not strictly increasing on the grid")


def _grid_verdict(prob, kind, grid_n, slack, lipschitz, maximize):
    """Shared grid protocol: sample, one x4 refinement around the extremum,
    then pass/fail with deterministic ties toward smaller V."""
    V = np.linspace(0.0, prob.a, grid_n + 1)
    G, psi_V = _margin_values(prob, kind, V)
    _check_boundary(prob, kind, V, psi_V)

    sign = 1.0 if maximize else -1.0
    H = sign * G
    idx = int(np.argmax(H))
    best, best_V = float(H[idx]), float(V[idx])

    h = prob.a / grid_n
    lo = max(0.0, best_V - h)
    hi = min(prob.a, best_V + h)
    if hi > lo:
        Vr = np.linspace(lo, hi, 9)
        Gr, _ = _margin_values(prob, kind, Vr)
        Hr = sign * Gr
        ridx = int(np.argmax(Hr))
        if float(Hr[ridx]) > best:
            best, best_V = float(Hr[ridx]), float(Vr[ridx])

    notes = [f"G(0) = {float(G[0])!r}", f"slack = {slack!r}"]
    if kind == KIND_ESCAPE:
        notes.append("sign-flipped storage: margin_max = -min(G), "
                     "pass means min(G) >= -slack")
        if np.any(psi_V - prob.epsilon < 0):
            notes.append("psi(V) - epsilon < 0 on part of the grid; phi and xi "
                         "taken with their odd extension there")

    rigorous = lipschitz is not None
    threshold = -abs(lipschitz) * h / 2.0 if rigorous else slack
    if rigorous:
        notes.append(f"rigorous mode: require margin_max <= -L*h/2 = {threshold!r}")
    passes = best <= threshold
    return CertificateVerdict(kind=kind, margin_max=best, argmax_V=best_V,
                              grid_n=grid_n, passes=passes, rigorous=rigorous,
                              notes=tuple(notes))


def lemma1_margin(prob, grid_n=4096, slack=0.0, lipschitz=None):
    """Inward-flux certificate for the C1 boundary lambda = psi(V).

    Pass iff max over [0, a] of
    psi'*[alpha + beta*phi(psi)] + delta(alpha_lower^-1) + xi(psi) is <= slack.
    """
    if prob.epsilon != 0.0:
        raise ValueError("boundedness certificate requires epsilon = 0")
    return _grid_verdict(prob, KIND_LEMMA1, grid_n, slack, lipschitz, maximize=True)


def lemma2_margin(prob, grid_n=4096, slack=0.0, lipschitz=None):
    """Ray-contraction certificate: psi*[alpha + beta*phi(psi)] +
    V*[delta(alpha_lower^-1) + xi(psi)] <= slack over [0, a].

    Requires the epigraph of psi over [0, a] to be star-shaped w.r.t. the
    origin (raises StarShapeError with the violating ray pair otherwise).
    """
    if prob.epsilon != 0.0:
        raise ValueError("boundedness certificate requires epsilon = 0")
    return _grid_verdict(prob, KIND_LEMMA2, grid_n, slack, lipschitz, maximize=True)


def escape_margin(prob, grid_n=4096, slack=0.0, lipschitz=None):
    """Escape certificate on the shifted boundary lambda = psi(V) - epsilon.

    Pass iff min over [0, a] of
    psi'*[alpha + beta*phi(psi - eps)] + delta(alpha_lower^-1) + xi(psi - eps)
    is >= -slack.  phi and xi are continued to negative arguments by their
    odd extension sign(s)*f(|s|) (noted in the verdict), which reproduces the
    identity-phi algebra exactly.
    """
    if not prob.epsilon > 0.0:
        raise ValueError("escape certificate requires epsilon > 0")
    return _grid_verdict(prob, KIND_ESCAPE, grid_n, slack, lipschitz, maximize=False)


_MARGIN_FNS = {KIND_LEMMA1: lemma1_margin, KIND_LEMMA2: lemma2_margin}


def max_feasible_a(prob, kind, a_hi, tol=1e-7, grid_n=1024, slack=0.0):
    """Largest a in [0, a_hi] for which the boundedness certificate passes.

    Feasibility is monotone (the constraint set over [0, a] is nested), so
    plain bisection applies: the return value passes and return + tol fails.
    Returns 0.0 when even a = tol is infeasible.
    """
    if kind not in _MARGIN_FNS:
        raise ValueError(f"kind must be one of {sorted(_MARGIN_FNS)}, got {kind!r}")
    margin = _MARGIN_FNS[kind]

    def feasible(a):
        trial = replace(prob, a=a)
        return margin(trial, grid_n=grid_n, slack=slack).passes

    if not feasible(tol):
        log.info("certificate infeasible already at a = tol = %g; returning 0", tol)
        return 0.0
    if feasible(a_hi):
        return float(a_hi)
    lo, hi = tol, float(a_hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def smallgain_bound(d):
    """Admissible-gain bound for the quadratic-Lyapunov cascade.

    gamma_star = k^2 * p_lower / (16 * sigma * B) with the optimal sqrt
    boundary coefficient r_star = k / (2c), c = 2*sigma*B/sqrt(p_lower).
    The reported cone slopes bound the invariant region in (|x|, lambda)
    coordinates: entering above the inner slope guarantees remaining above
    the outer slope.
    """
    c = 2.0 * d.sigma * d.B / math.sqrt(d.p_lower)
    gamma_star = d.k * d.k * d.p_lower / (16.0 * d.sigma * d.B)
    r_star = d.k / (2.0 * c)
    inner = d.k * math.sqrt(d.p_lower * d.p_upper) / (4.0 * d.sigma * d.B)
    outer = d.k * d.p_lower / (4.0 * d.sigma * d.B)
    return SmallGainResult(gamma_star=gamma_star, r_star=r_star,
                           omega_inner_slope=inner, omega_outer_slope=outer,
                           passes=d.gamma < gamma_star)
