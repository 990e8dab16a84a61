"""Comparison-function bound sets and monotone-inverse machinery.

A certificate problem is posed in terms of scalar comparison functions:
the stable part supplies V-bounds alpha_lower/alpha_upper (class-K-inf
envelopes of V), a drift bound ``alpha`` (continuous, any sign), a coupling
gain ``beta`` (continuous) and ``phi`` (class-K); the scalar unstable part
supplies ``delta`` and ``xi`` (class-K) bounding its drift from below.

Class membership is certified by sampling, not proved: functions are
checked on a grid (1024 points by default) over the working interval
[0, v_max], and inverses are found by bisection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import exprlang
from .exprlang import Expr, NonSmoothError, parse

__all__ = [
    "ScalarFn", "GridFn", "StableBoundSet", "UnstableBoundSet", "BoundSet",
    "RangeError", "MonotonicityError",
    "CLASS_K", "CLASS_P", "CLASS_NEITHER",
    "monotone_inverse", "monotone_inverse_array",
    "classify_comparison", "validate_bounds",
]

CLASS_K = "class-K"
CLASS_P = "class-P"
CLASS_NEITHER = "neither"

_ZERO_TOL = 1e-12


class RangeError(ValueError):
    """Requested inverse value lies above f(hi)."""


class MonotonicityError(ValueError):
    """Function found non-monotone while bracketing."""


@dataclass(frozen=True)
class ScalarFn:
    """One-variable real function backed by a parsed expression.

    ``params`` binds the expression's remaining identifiers to constants, so
    "p*V" with params {"p": 2.0} is the map V -> 2V.  Instances are immutable
    and evaluation is pure; calls accept floats (strict domain checks) or
    numpy arrays (vectorized, nan on domain violations).
    """

    expr: Expr
    var: str = "V"
    params: dict = field(default_factory=dict)
    text: str = ""

    @classmethod
    def from_string(cls, text, var="V", params=None):
        return cls(expr=parse(text), var=var, params=dict(params or {}), text=text)

    def __call__(self, x):
        if isinstance(x, np.ndarray):
            env = dict(self.params)
            env[self.var] = x
            out = np.asarray(exprlang.evaluate_array(self.expr, env), dtype=float)
            if out.shape != x.shape:  # constant subexpressions don't broadcast
                out = np.broadcast_to(out, x.shape).copy()
            return out
        env = dict(self.params)
        env[self.var] = float(x)
        return exprlang.evaluate(self.expr, env)

    def derivative(self):
        """Symbolic derivative as a new ScalarFn, or None if non-smooth."""
        try:
            d = exprlang.differentiate(self.expr, self.var)
        except NonSmoothError:
            return None
        return ScalarFn(expr=d, var=self.var, params=self.params,
                        text=exprlang.to_text(d))

    def fd(self, v):
        """Central-difference derivative at v (fallback for non-smooth ASTs)."""
        return exprlang.fd_derivative(self, v)

    def __repr__(self):
        src = self.text or exprlang.to_text(self.expr)
        return f"ScalarFn({self.var} -> {src})"


@dataclass(frozen=True)
class GridFn:
    """Callable wrapper for functions without an expression form (sampled
    envelopes, synthesized tuning laws).  Same calling convention as ScalarFn."""

    fn: object
    label: str = "grid-fn"

    def __call__(self, x):
        return self.fn(x)

    def derivative(self):
        return None

    def __repr__(self):
        return f"GridFn({self.label})"


@dataclass(frozen=True)
class StableBoundSet:
    """V-bounds for the stable block: alpha_lower/upper class-K-inf,
    drift bound alpha (any sign), coupling gain beta, phi class-K."""

    alpha_lower: ScalarFn
    alpha_upper: ScalarFn
    alpha: ScalarFn
    beta: ScalarFn
    phi: ScalarFn


@dataclass(frozen=True)
class UnstableBoundSet:
    """Lower drift bound for the scalar tuning state: -xi(|l|) - delta(|x|)."""

    delta: ScalarFn
    xi: ScalarFn


@dataclass(frozen=True)
class BoundSet:
    stable: StableBoundSet
    unstable: UnstableBoundSet
    v_max: float

    def __post_init__(self):
        if not self.v_max > 0:
            raise ValueError(f"v_max must be positive, got {self.v_max}")


def monotone_inverse(f, y, hi, tol=1e-12):
    """Invert a strictly increasing f on [0, hi] by bisection.

    Returns x with the bracket narrowed to ``tol`` (absolute, on the
    argument); returns 0 when y <= f(0).  Raises RangeError if y > f(hi) and
    MonotonicityError if samples taken while bracketing violate monotonicity.
    """
    f0 = f(0.0)
    fhi = f(hi)
    if f0 > fhi:
        raise MonotonicityError(f"f(0)={f0} > f({hi})={fhi}")
    if y <= f0:
        return 0.0
    if y > fhi:
        raise RangeError(f"y={y} above f({hi})={fhi}")
    lo, up = 0.0, hi
    flo, fup = f0, fhi
    while up - lo > tol:
        mid = 0.5 * (lo + up)
        fmid = f(mid)
        if fmid < flo or fmid > fup:
            raise MonotonicityError(
                f"non-monotone sample f({mid})={fmid} outside [{flo}, {fup}]")
        if fmid < y:
            lo, flo = mid, fmid
        else:
            up, fup = mid, fmid
    return 0.5 * (lo + up)


def monotone_inverse_array(f, y, hi, tol=1e-12):
    """Vectorized bisection inverse; y is an array, result has y's shape.

    Entries with y <= f(0) map to 0.  Same range/monotonicity errors as the
    scalar version (monotonicity checked on the sampled midpoints).
    """
    y = np.asarray(y, dtype=float)
    f0 = float(f(np.zeros(1))[0])
    fhi = float(f(np.full(1, hi))[0])
    if f0 > fhi:
        raise MonotonicityError(f"f(0)={f0} > f({hi})={fhi}")
    if np.any(y > fhi):
        raise RangeError(f"max y={y.max()} above f({hi})={fhi}")
    lo = np.zeros_like(y)
    up = np.full_like(y, hi)
    flo = np.full_like(y, f0)
    fup = np.full_like(y, fhi)
    n_iter = max(1, int(np.ceil(np.log2(max(hi / tol, 2.0)))))
    for _ in range(n_iter):
        mid = 0.5 * (lo + up)
        fmid = f(mid)
        if np.any(fmid < flo - _ZERO_TOL) or np.any(fmid > fup + _ZERO_TOL):
            raise MonotonicityError("non-monotone samples during array inverse")
        go_right = fmid < y
        lo = np.where(go_right, mid, lo)
        flo = np.where(go_right, fmid, flo)
        up = np.where(go_right, up, mid)
        fup = np.where(go_right, fup, fmid)
    out = 0.5 * (lo + up)
    return np.where(y <= f0, 0.0, out)


def classify_comparison(f, grid_n=1024, hi=1.0):
    """Sampled class test: class-K (zero at zero, strictly increasing),
    class-P (zero at zero, positive on (0, hi]), or neither."""
    s = np.linspace(0.0, hi, grid_n)
    vals = f(s)
    if not np.all(np.isfinite(vals)):
        raise exprlang.EvalError(f"non-finite sample while classifying {f!r}")
    if abs(vals[0]) > _ZERO_TOL:
        return CLASS_NEITHER
    if np.all(np.diff(vals) > 0):
        return CLASS_K
    if np.all(vals[1:] > 0):
        return CLASS_P
    return CLASS_NEITHER


def _check_zero(name, fn, violations):
    v0 = fn(0.0)
    if abs(v0) > _ZERO_TOL:
        violations.append(f"{name}(0) = {v0!r}, expected 0")
        return False
    return True


def validate_bounds(b, grid_n=1024):
    """Run all admissibility checks on a grid over [0, v_max].

    Returns a list of human-readable violations; empty means admissible.
    """
    violations = []
    s = np.linspace(0.0, b.v_max, grid_n)
    st, un = b.stable, b.unstable

    for name, fn in (("alpha_lower", st.alpha_lower), ("alpha_upper", st.alpha_upper),
                     ("phi", st.phi), ("delta", un.delta), ("xi", un.xi)):
        _check_zero(name, fn, violations)

    def samples(name, fn):
        vals = fn(s)
        if not np.all(np.isfinite(vals)):
            violations.append(f"{name} not finite on [0, {b.v_max}]")
            return None
        return vals

    lo_vals = samples("alpha_lower", st.alpha_lower)
    up_vals = samples("alpha_upper", st.alpha_upper)
    for name, vals in (("alpha_lower", lo_vals), ("alpha_upper", up_vals),
                       ("phi", samples("phi", st.phi))):
        if vals is not None and not np.all(np.diff(vals) > 0):
            violations.append(f"{name} not strictly increasing on [0, {b.v_max}]")
    if lo_vals is not None and up_vals is not None:
        bad = lo_vals > up_vals + _ZERO_TOL
        if np.any(bad):
            at = s[np.argmax(bad)]
            violations.append(f"alpha_lower exceeds alpha_upper (first at s={at:g})")
    for name, fn in (("delta", un.delta), ("xi", un.xi)):
        vals = samples(name, fn)
        if vals is not None and np.any(np.diff(vals) < -_ZERO_TOL):
            violations.append(f"{name} not nondecreasing on [0, {b.v_max}]")
    for name, fn in (("alpha", st.alpha), ("beta", st.beta)):
        samples(name, fn)
    return violations
