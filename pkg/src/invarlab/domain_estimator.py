"""Invariance-domain estimates, escape parameter ranges, tuning-law synthesis.

Builds on the certificate margins: sweeps of linear boundaries produce the
cone-union picture of the invariance region; the escape range gives the
interval of boundary slopes certifying non-convergence to the origin; and
the synthesis routine constructs, for a plant with a class-P decay bound,
a boundary psi (a star-shaped or convex envelope of alpha0/(2*D)) together
with the tuning-law gain gamma(V) = psi(V)*alpha0(V)/(2a) whose ray
certificate is then verified and returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bounds_core import (BoundSet, GridFn, ScalarFn, StableBoundSet,
                          UnstableBoundSet, classify_comparison,
                          monotone_inverse, CLASS_NEITHER)
from .certificates import (KIND_LEMMA1, BoundaryCandidate, CertificateProblem,
                           CertificateVerdict, escape_margin, lemma2_margin,
                           max_feasible_a)
from .exprlang import Bin, Neg, Num
from .star_envelope import GridFunction, convex_env, star_env

__all__ = [
    "InvarianceDomain", "ConeSweep", "EscapeRange", "SynthesisResult",
    "SynthesisError", "membership", "membership_array",
    "sweep_linear_cones", "escape_p_range", "synthesize_tuning_law",
    "prototype_bounds",
]

DOMAIN_BOUNDED = "bounded"
DOMAIN_ESCAPE = "escape"


class SynthesisError(RuntimeError):
    """No certified interval cap found; carries the per-attempt margins."""

    def __init__(self, attempts):
        self.attempts = tuple(attempts)
        lines = ", ".join(f"a={a:.3e}: margin={m:.3e}" for a, m in attempts)
        super().__init__(f"tuning-law synthesis failed; margins per halving: {lines}")


@dataclass(frozen=True)
class InvarianceDomain:
    """Membership predicate for certified regions in (V, lambda) coordinates.

    bounded: psi(a) >= lambda >= psi(V), V in [0, a]  (boundary inclusive);
    escape:  lambda <= psi(V) - epsilon, V in [0, a].
    """

    kind: str
    boundary: BoundaryCandidate
    a: float
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in (DOMAIN_BOUNDED, DOMAIN_ESCAPE):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.kind == DOMAIN_ESCAPE and not self.epsilon > 0:
            raise ValueError("escape domain requires epsilon > 0")

    @property
    def psi_a(self):
        return float(self.boundary.psi(self.a))


def membership(dom, V, lam):
    """Exact, boundary-inclusive membership of the point (V, lambda)."""
    if V < 0:
        raise ValueError(f"V must be nonnegative, got {V}")
    return bool(membership_array(dom, np.asarray([V], dtype=float),
                                 np.asarray([lam], dtype=float))[0])


def membership_array(dom, V, lam):
    V = np.asarray(V, dtype=float)
    lam = np.asarray(lam, dtype=float)
    psi_V = np.asarray(dom.boundary.psi(V), dtype=float)
    in_cap = (V >= 0.0) & (V <= dom.a)
    if dom.kind == DOMAIN_BOUNDED:
        return in_cap & (lam >= psi_V) & (lam <= dom.psi_a)
    return in_cap & (lam <= psi_V - dom.epsilon)


@dataclass(frozen=True)
class ConeSweep:
    p_values: np.ndarray
    a_of_p: np.ndarray
    x_nodes: np.ndarray
    lambda_min: np.ndarray  # nan where no feasible cone covers |x|
    notes: tuple = ()

    def as_dict(self):
        return {"p_values": self.p_values.tolist(),
                "a_of_p": self.a_of_p.tolist(),
                "notes": list(self.notes)}


@dataclass(frozen=True)
class EscapeRange:
    """Open-below interval (0, p_max] of certified escape boundary slopes."""

    p_max: float
    empty: bool
    crosscheck: dict | None = None

    def as_dict(self):
        return {"p_max": self.p_max, "empty": self.empty,
                "crosscheck": self.crosscheck}


@dataclass(frozen=True)
class SynthesisResult:
    psi: GridFunction
    D_a: float
    gamma0: ScalarFn
    gamma_fn: GridFn
    a_star: float
    verdict: CertificateVerdict
    notes: tuple = ()


def sweep_linear_cones(bounds, p_lo, p_hi, n, grid_n=1024, slack=0.0,
                       a_hi=None, tol=1e-7, x_nodes=512):
    """Feasible cap a(p) for linear boundaries psi = p*V over a log-spaced
    slope grid, plus the lower boundary lambda_min(|x|) of the cone union.

    The union boundary is reported against |x| through V = alpha_lower(|x|):
    the cone with slope p covers |x| up to alpha_lower^-1(a(p)) and
    contributes lambda = p*alpha_lower(|x|) there.
    """
    if not p_lo > 0:
        raise ValueError("p_lo must be positive")
    if n < 2:
        raise ValueError("need at least 2 sweep points")
    p_values = np.geomspace(p_lo, p_hi, n)
    cap = min(a_hi if a_hi is not None else bounds.v_max, bounds.v_max)

    a_of_p = np.empty(n)
    for i, p in enumerate(p_values):
        prob = CertificateProblem(bounds=bounds,
                                  boundary=BoundaryCandidate.linear(p),
                                  a=cap, epsilon=0.0)
        a_of_p[i] = max_feasible_a(prob, KIND_LEMMA1, a_hi=cap,
                                   tol=tol, grid_n=grid_n, slack=slack)

    notes = []
    feasible = a_of_p > tol
    if not np.any(feasible):
        notes.append("all cones infeasible on the sweep grid")
        empty = np.linspace(0.0, 1.0, x_nodes + 1)
        return ConeSweep(p_values=p_values, a_of_p=a_of_p, x_nodes=empty,
                         lambda_min=np.full(x_nodes + 1, np.nan),
                         notes=tuple(notes))

    al = bounds.stable.alpha_lower
    x_reach = np.array([monotone_inverse(al, a, hi=bounds.v_max) if ok else 0.0
                        for a, ok in zip(a_of_p, feasible)])
    x = np.linspace(0.0, float(x_reach.max()), x_nodes + 1)
    V_x = np.asarray(al(x), dtype=float)
    lam = p_values[:, None] * V_x[None, :]
    covered = feasible[:, None] & (V_x[None, :] <= a_of_p[:, None])
    lam = np.where(covered, lam, np.inf)
    lam_min = lam.min(axis=0)
    lam_min = np.where(np.isfinite(lam_min), lam_min, np.nan)
    return ConeSweep(p_values=p_values, a_of_p=a_of_p, x_nodes=x,
                     lambda_min=lam_min, notes=tuple(notes))


def prototype_bounds(k, gamma, v_max=10.0):
    """Bound set of the scalar prototype cascade dx = -k*x + x^2*lam,
    dlam = -gamma*x^2 with V = x^2: alpha = -2kV, beta = 2V^(3/2),
    phi = identity, delta = gamma*s^2, xi = 0."""
    st = StableBoundSet(
        alpha_lower=ScalarFn.from_string("s^2", var="s"),
        alpha_upper=ScalarFn.from_string("s^2", var="s"),
        alpha=ScalarFn.from_string("-2*k*V", var="V", params={"k": k}),
        beta=ScalarFn.from_string("2*V^(3/2)", var="V"),
        phi=ScalarFn.from_string("s", var="s"),
    )
    un = UnstableBoundSet(
        delta=ScalarFn.from_string("gamma*s^2", var="s", params={"gamma": gamma}),
        xi=ScalarFn.from_string("0", var="s"),
    )
    return BoundSet(stable=st, unstable=un, v_max=v_max)


def escape_p_range(k, gamma, epsilon, crosscheck=True, grid_n=4096):
    """Boundary slopes p in (0, p_max] certifying escape for the prototype
    cascade, by the closed form

        p_max = [(sqrt(16/27*eps^3 + 8*gamma*k) - 4/3*sqrt(eps^3/3)) / (4k)]^2

    obtained by bounding the coupling term from below by its minimum
    -4/3*sqrt(eps^3*p/3) (attained at V = eps/(3p)).  When ``crosscheck`` is
    set the result is verified against the grid margin at p_max*(1 - 1e-6)
    (must pass) and p_max*(1 + 1e-3) (must fail).
    """
    if not (k > 0 and epsilon > 0):
        raise ValueError("k and epsilon must be positive")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if gamma == 0.0:
        return EscapeRange(p_max=0.0, empty=True)
    root = math.sqrt(16.0 / 27.0 * epsilon ** 3 + 8.0 * gamma * k)
    p_max = ((root - 4.0 / 3.0 * math.sqrt(epsilon ** 3 / 3.0)) / (4.0 * k)) ** 2
    if p_max <= 0.0:
        return EscapeRange(p_max=p_max, empty=True)
    if not crosscheck:
        return EscapeRange(p_max=p_max, empty=False)

    # interval cap wide enough to contain the interior minimizer eps/(3p)
    a_check = max(1.0, 2.0 * epsilon / (3.0 * p_max))
    bounds = prototype_bounds(k, gamma, v_max=10.0 * a_check)
    results = {}
    for label, p, want in (("pass_at", p_max * (1.0 - 1e-6), True),
                           ("fail_at", p_max * (1.0 + 1e-3), False)):
        prob = CertificateProblem(bounds=bounds,
                                  boundary=BoundaryCandidate.linear(p),
                                  a=a_check, epsilon=epsilon)
        verdict = escape_margin(prob, grid_n=grid_n, slack=0.0)
        results[label] = {"p": p, "pass": verdict.passes,
                          "margin_max": verdict.margin_max}
        if verdict.passes is not want:
            raise RuntimeError(
                f"escape range cross-check failed: margin at p={p} "
                f"{'passed' if verdict.passes else 'failed'}, expected "
                f"{'pass' if want else 'fail'}")
    return EscapeRange(p_max=p_max, empty=False, crosscheck=results)


def synthesize_tuning_law(alpha0, beta, phi, phi_lipschitz, a_init,
                          envelope_kind="star", grid_n=4096, max_halvings=40,
                          envelope_tol=1e-8):
    """Construct a certified boundary and tuning-law gain for a plant with
    decay bound -alpha0 (class P) and coupling beta(V)*phi(|lambda|).

    For the current cap a: D(a) = phi_lipschitz * max beta on [0, a] (with a
    hair of headroom so the certified inequality survives roundoff), psi is
    the chosen envelope of alpha0/(2*D) on [0, a], gamma0 = alpha0/(2a) and
    gamma(V) = psi(V)*gamma0(V).  The ray certificate is then checked with
    the synthesized gamma as the tuning-state drift bound; on failure the
    cap is halved (at most ``max_halvings`` times).
    """
    if not a_init > 0:
        raise ValueError("a_init must be positive")
    if not phi_lipschitz > 0:
        raise ValueError("phi_lipschitz must be positive")

    attempts = []
    notes = []
    a = float(a_init)
    for _ in range(max_halvings + 1):
        grid = np.linspace(0.0, a, grid_n + 1)
        a0_vals = np.asarray(alpha0(grid), dtype=float)
        if np.any(a0_vals < -1e-12):
            raise ValueError("alpha0 must be nonnegative on [0, a]")
        cls = classify_comparison(alpha0, grid_n=1024, hi=a)
        if cls == CLASS_NEITHER and not any("class P" in n for n in notes):
            notes.append(f"alpha0 not certified class P on (0, {a:g}] "
                         "by the sampled class test")

        beta_vals = np.asarray(beta(grid), dtype=float)
        # headroom factor keeps the certified margin strictly nonpositive
        # under floating-point rounding at the touching nodes
        D = float(np.max(beta_vals)) * float(phi_lipschitz) * (1.0 + 1e-9)

        def target(v, _D=D):
            return np.asarray(alpha0(v), dtype=float) / (2.0 * _D)

        if envelope_kind == "star":
            psi_grid = star_env(target, 0.0, (0.0, a), tol=envelope_tol,
                                out_n=grid_n).envelope
        elif envelope_kind == "convex":
            psi_grid = convex_env(target, (0.0, a), n=grid_n)
        else:
            raise ValueError(f"unknown envelope kind {envelope_kind!r}")
        if np.any(psi_grid.values[1:] <= 0.0) \
                and not any("stall" in n for n in notes):
            notes.append("boundary envelope vanishes inside (0, a]; the "
                         "certificate still passes with zero margin there "
                         "but the tuning law stalls")

        gamma0 = ScalarFn(expr=Bin("/", alpha0.expr, Num(2.0 * a)),
                          var=alpha0.var, params=alpha0.params,
                          text=f"({alpha0.text or 'alpha0'})/(2*{a!r})")
        gamma_fn = GridFn(
            fn=lambda v, _p=psi_grid, _g=gamma0: np.asarray(_p(v), dtype=float)
            * np.asarray(_g(np.asarray(v, dtype=float)), dtype=float),
            label="psi(V)*alpha0(V)/(2a)")

        stable = StableBoundSet(
            alpha_lower=ScalarFn.from_string("s", var="s"),
            alpha_upper=ScalarFn.from_string("s", var="s"),
            alpha=ScalarFn(expr=Neg(alpha0.expr), var=alpha0.var,
                           params=alpha0.params,
                           text=f"-({alpha0.text or 'alpha0'})"),
            beta=beta, phi=phi)
        unstable = UnstableBoundSet(delta=gamma_fn,
                                    xi=ScalarFn.from_string("0", var="s"))
        bounds = BoundSet(stable=stable, unstable=unstable, v_max=10.0 * a)
        prob = CertificateProblem(bounds=bounds,
                                  boundary=BoundaryCandidate.from_grid(psi_grid),
                                  a=a, epsilon=0.0)
        verdict = lemma2_margin(prob, grid_n=grid_n, slack=0.0)
        attempts.append((a, verdict.margin_max))
        if verdict.passes:
            return SynthesisResult(psi=psi_grid, D_a=D, gamma0=gamma0,
                                   gamma_fn=gamma_fn, a_star=a, verdict=verdict,
                                   notes=tuple(notes))
        a *= 0.5
    raise SynthesisError(attempts)
