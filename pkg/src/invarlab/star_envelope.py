"""Star-shaped and convex envelopes of scalar functions on an interval.

A function f with f(base) anchored is lowered onto the largest minorant
whose epigraph is star-shaped with respect to (base, f(base)).  The
construction is the chord one: for a sample point z, the chord minorant
replaces f between base and z by the smaller of f and the straight chord;
the envelope is the infimum of chord minorants over a refining grid of z.

Numerically the chord grid is doubled (n0, 2*n0, 4*n0, ...) and the
envelope re-sampled on a fixed output grid after each doubling; since the
grids are nested the iterates decrease pointwise, and the recorded
sup-norm deltas measure convergence.  Chord refinement is capped at the
output resolution: every chord endpoint is then itself an output node,
which makes the sampled ordering conv(f) <= star(f) <= f and the ray test
f(g*V) <= g*f(V) hold exactly at the nodes rather than only in the limit.

The ray inequality used throughout is the epigraph convention: chords from
the base point lie on or above the function, i.e. for base 0 and f(0)=0,
f(g*V) <= g*f(V) for g in [0,1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridFunction", "EnvelopeReport", "StarShapeResult", "DegenerateChordError",
    "chord_minorant", "star_env", "convex_env", "is_star_shaped",
]

_RAY_TOL = 1e-12


class DegenerateChordError(ValueError):
    """Chord endpoints coincide (z == x)."""


@dataclass(frozen=True)
class GridFunction:
    """Samples of a function at n+1 uniform nodes on [lo, hi].

    Calling interpolates piecewise-linearly (constant beyond the interval).
    """

    lo: float
    hi: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if not self.hi > self.lo:
            raise ValueError(f"need hi > lo, got [{self.lo}, {self.hi}]")
        if vals.ndim != 1 or vals.size < 3:
            raise ValueError("need at least 3 samples (n >= 2)")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid values must be finite")

    @property
    def n(self):
        return self.values.size - 1

    @property
    def nodes(self):
        return np.linspace(self.lo, self.hi, self.values.size)

    def __call__(self, x):
        return np.interp(x, self.nodes, self.values)

    def rows(self):
        """(node, value) pairs, e.g. for CSV output."""
        return list(zip(self.nodes.tolist(), self.values.tolist()))


@dataclass(frozen=True)
class EnvelopeReport:
    """Envelope samples plus the refinement record.

    ``sup_norm_deltas`` holds the sup-norm change per chord-grid doubling.
    Iterates decrease pointwise (nested grids), so deltas typically decay
    monotonically; when the binding chord abscissa sits exactly on a coarse
    binary-rational node a doubling can change nothing and a later one
    improve again, so an isolated zero followed by a smaller positive entry
    is possible for interior-tangent oscillations.
    """

    envelope: GridFunction
    iterations: int
    sup_norm_deltas: tuple
    base_point: float
    converged: bool
    notes: tuple = ()


@dataclass(frozen=True)
class StarShapeResult:
    passes: bool
    witness: tuple | None = None  # (V, gamma) of the first violated ray pair


def chord_minorant(f, x, z, y):
    """min(f(y), chord of f from x to z evaluated at y) when y lies strictly
    between x and z; plain f(y) otherwise."""
    if z == x:
        raise DegenerateChordError(f"chord endpoints coincide at {x}")
    r = (y - x) / (z - x)
    fy = float(f(y))
    if 0.0 < r < 1.0:
        chord = float(f(x)) + r * (float(f(z)) - float(f(x)))
        return min(fy, chord)
    return fy


def _chord_pass(y, fy, x, fx, z, fz):
    """Envelope over all chords from the base x to grid points z, sampled
    at the output nodes y.  Vectorized via one-sided slope extrema."""
    env = fy.copy()
    slopes = np.where(z == x, np.nan, (fz - fx) / np.where(z == x, 1.0, z - x))

    right = z > x
    if np.any(right):
        zr, sr = z[right], slopes[right]
        # minimum chord above each node comes from the minimum slope among z > y
        suffix_min = np.minimum.accumulate(sr[::-1])[::-1]
        idx = np.searchsorted(zr, y, side="right")
        has = (idx < zr.size) & (y > x)
        safe = np.minimum(idx, zr.size - 1)
        cand = fx + (y - x) * suffix_min[safe]
        env = np.where(has, np.minimum(env, cand), env)

    left = z < x
    if np.any(left):
        zl, sl = z[left], slopes[left]
        prefix_max = np.maximum.accumulate(sl)
        idx = np.searchsorted(zl, y, side="left") - 1
        has = (idx >= 0) & (y < x)
        safe = np.maximum(idx, 0)
        cand = fx + (y - x) * prefix_max[safe]
        env = np.where(has, np.minimum(env, cand), env)

    return env


def star_env(f, x, interval, tol=1e-8, n0=8, out_n=4096, max_doublings=16):
    """Star-shaped envelope of f on ``interval`` with respect to base point x.

    The chord grid doubles from n0 subintervals until it reaches the output
    resolution (or ``max_doublings`` passes elapse, which is flagged, not
    raised).  Refinement always runs to the cap so chord endpoints coincide
    with output nodes; ``tol`` classifies convergence of the recorded
    sup-norm deltas rather than cutting the refinement short.
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not lo <= x <= hi:
        raise ValueError(f"base point {x} outside [{lo}, {hi}]")
    y = np.linspace(lo, hi, out_n + 1)
    fy = np.asarray(f(y), dtype=float)
    if not np.all(np.isfinite(fy)):
        raise ValueError("f not finite on the output grid")
    fx = float(f(float(x)))

    deltas = []
    notes = []
    n_chord = min(n0, out_n)
    prev = None
    iterations = 0
    while True:
        z = np.linspace(lo, hi, n_chord + 1)
        fz = np.asarray(f(z), dtype=float)
        env = _chord_pass(y, fy, x, fx, z, fz)
        iterations += 1
        if prev is not None:
            deltas.append(float(np.max(np.abs(prev - env))))
        prev = env
        if n_chord >= out_n:
            break
        if iterations > max_doublings:
            notes.append(f"chord grid stopped at {n_chord} subintervals after "
                         f"{max_doublings} doublings (output wants {out_n})")
            break
        n_chord = min(2 * n_chord, out_n)

    converged = not deltas or deltas[-1] <= tol
    if not converged:
        notes.append(f"sup-norm delta {deltas[-1]:.3e} still above tol {tol:.1e} "
                     "at the final refinement")
    grid = GridFunction(lo=lo, hi=hi, values=env)
    return EnvelopeReport(envelope=grid, iterations=iterations,
                          sup_norm_deltas=tuple(deltas), base_point=float(x),
                          converged=bool(converged), notes=tuple(notes))


def convex_env(f, interval, n=4096):
    """Lower convex hull of n+1 uniform samples, returned as the
    piecewise-linear hull re-sampled at the same nodes (monotone chain)."""
    lo, hi = float(interval[0]), float(interval[1])
    y = np.linspace(lo, hi, n + 1)
    fy = np.asarray(f(y), dtype=float)
    if not np.all(np.isfinite(fy)):
        raise ValueError("f not finite on the sample grid")
    hull_x = [y[0]]
    hull_v = [fy[0]]
    for i in range(1, y.size):
        while len(hull_x) >= 2:
            cross = ((hull_x[-1] - hull_x[-2]) * (fy[i] - hull_v[-2])
                     - (hull_v[-1] - hull_v[-2]) * (y[i] - hull_x[-2]))
            if cross <= 0.0:
                hull_x.pop()
                hull_v.pop()
            else:
                break
        hull_x.append(y[i])
        hull_v.append(fy[i])
    vals = np.interp(y, np.asarray(hull_x), np.asarray(hull_v))
    return GridFunction(lo=lo, hi=hi, values=vals)


def is_star_shaped(f, a, grid_n=256):
    """Sampled ray test for a star-shaped epigraph with respect to the origin.

    Requires f(0) = 0 (within 1e-12; raises otherwise) and checks
    f(g*V) <= g*f(V) + 1e-12 over V in (0, a] and g in (0, 1).  The first
    violated pair, scanning V outer and g inner, is returned as a witness.
    """
    f0 = float(f(0.0))
    if abs(f0) > _RAY_TOL:
        raise ValueError(f"f(0) = {f0!r}, expected 0")
    V = np.linspace(0.0, a, grid_n + 1)[1:]
    g = np.linspace(0.0, 1.0, grid_n + 1)[1:-1]
    fV = np.asarray(f(V), dtype=float)
    pts = g[None, :] * V[:, None]
    lhs = np.asarray(f(pts.ravel()), dtype=float).reshape(pts.shape)
    rhs = g[None, :] * fV[:, None]
    bad = lhs > rhs + _RAY_TOL
    if not np.any(bad):
        return StarShapeResult(passes=True)
    flat = int(np.argmax(bad))
    i, j = divmod(flat, g.size)
    return StarShapeResult(passes=False, witness=(float(V[i]), float(g[j])))
