"""ODE harness for exercising certified domains empirically.

Systems have state (x, lambda) with the scalar tuning state last.  Two
integrators are provided: classical fixed-step RK4 (vectorizable across a
batch of initial conditions) and an embedded Dormand-Prince 4(5) pair with
standard error-per-step control.  Blow-up is flagged when the state norm
exceeds ``blowup_norm`` or the adaptive step collapses below ``min_step``;
both are treated as finite-escape suspects.

Certificates are the ground truth; simulation corroborates them.  The
monitor checks domain membership at sample times only, with a relative
tolerance absorbing integration error.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import exprlang
from .domain_estimator import membership_array

__all__ = [
    "SystemModel", "StepConfig", "Trajectory", "TrajectoryEvents",
    "MonitorReport", "TrialSummary", "IntegrationError",
    "integrate", "integrate_batch", "builtin", "from_expressions",
    "monitor", "batch_membership_trial", "inside_with_tol",
]

BLOWUP_NORM = "norm"
BLOWUP_STEP = "step-collapse"

_MONITOR_TOL = 1e-6   # relative invariance tolerance 1e-6*(1+|lambda|)
_LAMBDA_SLACK = 1e-9  # monotonicity slack per sample pair


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SystemModel:
    """Right-hand side plus the Lyapunov-like V of the x-part.

    ``rhs(t, y)`` must accept states of shape (..., n_x+1) with lambda in
    the last slot and be vectorized over leading axes; ``v_fn`` maps the
    x-part (..., n_x) to V.  ``x_halfwidth(a)`` returns a half-width h such
    that the box |x_i| <= h covers {V(x) <= a} (used for rejection
    sampling); None when unknown.
    """

    name: str
    n_x: int
    rhs: object
    v_fn: object
    params: dict = field(default_factory=dict)
    rhs_exprs: tuple | None = None
    x_halfwidth: object | None = None

    @property
    def dim(self):
        return self.n_x + 1

    def v_of_state(self, y):
        return np.asarray(self.v_fn(np.asarray(y, dtype=float)[..., :self.n_x]),
                          dtype=float)


@dataclass(frozen=True)
class StepConfig:
    method: str = "rk45-adaptive"  # or "rk4-fixed"
    h: float | None = None
    rtol: float = 1e-9
    atol: float = 1e-12
    t_end: float = 10.0
    max_steps: int = 2_000_000
    blowup_norm: float = 1e6
    min_step: float = 1e-12
    safety: float = 0.9
    max_growth: float = 5.0
    record_every: int = 1

    def __post_init__(self):
        if self.method not in ("rk4-fixed", "rk45-adaptive"):
            raise ValueError(f"unknown method {self.method!r}")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.method == "rk4-fixed" and not (self.h and self.h > 0):
            raise ValueError("rk4-fixed requires a positive step h")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class TrajectoryEvents:
    exit_time: float | None = None
    blowup_time: float | None = None
    blowup_kind: str | None = None
    lambda_limit: float | None = None


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    states: np.ndarray
    V: np.ndarray | None = None
    psi_V: np.ndarray | None = None
    events: TrajectoryEvents = field(default_factory=TrajectoryEvents)

    @property
    def x(self):
        return self.states[:, :-1]

    @property
    def lam(self):
        return self.states[:, -1]


@dataclass(frozen=True)
class MonitorReport:
    stayed: bool
    first_exit: float | None
    lambda_monotone: bool
    x_final_norm: float
    min_dist_origin: float

    def as_dict(self):
        return {"stayed": self.stayed, "first_exit": self.first_exit,
                "lambda_monotone": self.lambda_monotone,
                "x_final_norm": self.x_final_norm,
                "min_dist_origin": self.min_dist_origin}


@dataclass(frozen=True)
class TrialSummary:
    n_samples: int
    seed: int
    n_stayed: int
    n_lambda_monotone: int
    max_x_final_norm: float
    min_dist_origin: float
    reports: tuple = ()
    notes: tuple = ()

    def as_dict(self):
        return {"n_samples": self.n_samples, "seed": self.seed,
                "n_stayed": self.n_stayed,
                "n_lambda_monotone": self.n_lambda_monotone,
                "max_x_final_norm": self.max_x_final_norm,
                "min_dist_origin": self.min_dist_origin,
                "reports": [r.as_dict() for r in self.reports],
                "notes": list(self.notes)}


# ---------------------------------------------------------------------------
# Built-in systems
# ---------------------------------------------------------------------------

def _require(params, names, builtin_name):
    missing = [n for n in names if n not in params]
    if missing:
        raise ValueError(f"missing parameter(s) {missing} for builtin "
                         f"'{builtin_name}'")
    return [float(params[n]) for n in names]


def builtin(name, params):
    """Instantiate a built-in system model.

    prototype:   dx1 = -k*x1 + x1^2*lam, dlam = -gamma*x1^2, V = x1^2
    cascade_abs: dx1 = -tau1*x1 + c1*lam, dlam = -c2*|x1|,  V = x1^2
    regulation:  dx = -kappa(x) + (x^2+1)*D*(sin(theta) - sin(theta - lam)),
                 dlam = -gamma(V(x)) from a synthesis result, V = x^2/2,
                 kappa the unit-saturated cubic.
    """
    if name == "prototype":
        k, gamma = _require(params, ("k", "gamma"), name)

        def rhs(t, y, _k=k, _g=gamma):
            x1 = y[..., 0]
            lam = y[..., 1]
            return np.stack([-_k * x1 + x1 * x1 * lam, -_g * x1 * x1], axis=-1)

        return SystemModel(name=name, n_x=1, rhs=rhs,
                           v_fn=lambda x: x[..., 0] ** 2,
                           params={"k": k, "gamma": gamma},
                           x_halfwidth=lambda a: math.sqrt(a))

    if name == "cascade_abs":
        tau1, c1, c2 = _require(params, ("tau1", "c1", "c2"), name)

        def rhs(t, y, _t1=tau1, _c1=c1, _c2=c2):
            x1 = y[..., 0]
            lam = y[..., 1]
            return np.stack([-_t1 * x1 + _c1 * lam, -_c2 * np.abs(x1)], axis=-1)

        return SystemModel(name=name, n_x=1, rhs=rhs,
                           v_fn=lambda x: x[..., 0] ** 2,
                           params={"tau1": tau1, "c1": c1, "c2": c2},
                           x_halfwidth=lambda a: math.sqrt(a))

    if name == "regulation":
        if "synthesis" not in params:
            raise ValueError("missing parameter(s) ['synthesis'] for builtin "
                             "'regulation'")
        theta = float(params.get("theta", 0.3))
        D = float(params.get("D", 1.0))
        gamma_fn = params["synthesis"].gamma_fn

        def rhs(t, y, _th=theta, _D=D, _gf=gamma_fn):
            x = y[..., 0]
            lam = y[..., 1]
            kappa = np.clip(x, -1.0, 1.0) ** 3
            drive = (x * x + 1.0) * _D * (np.sin(_th) - np.sin(_th - lam))
            dlam = -np.asarray(_gf(0.5 * x * x), dtype=float)
            return np.stack([-kappa + drive, dlam], axis=-1)

        return SystemModel(name=name, n_x=1, rhs=rhs,
                           v_fn=lambda x: 0.5 * x[..., 0] ** 2,
                           params={"theta": theta, "D": D},
                           x_halfwidth=lambda a: math.sqrt(2.0 * a))

    raise ValueError(f"unknown builtin system {name!r}")


def from_expressions(rhs_texts, v_text, params=None, name="custom",
                     x_halfwidth=None):
    """System model from right-hand-side expressions over x1..xn, lambda, t
    and a V expression over x1..xn."""
    params = dict(params or {})
    exprs = tuple(exprlang.parse(s) for s in rhs_texts)
    v_expr = exprlang.parse(v_text)
    n_x = len(exprs) - 1
    if n_x < 1:
        raise ValueError("need at least one x component plus lambda")
    x_names = [f"x{i + 1}" for i in range(n_x)]

    def rhs(t, y, _exprs=exprs, _names=x_names, _p=params):
        env = dict(_p)
        for i, nm in enumerate(_names):
            env[nm] = y[..., i]
        env["lambda"] = y[..., n_x]
        env["t"] = t
        comps = [np.broadcast_to(
            np.asarray(exprlang.evaluate_array(e, env), dtype=float),
            y[..., 0].shape) for e in _exprs]
        return np.stack(comps, axis=-1)

    def v_fn(x, _e=v_expr, _names=x_names, _p=params):
        env = dict(_p)
        for i, nm in enumerate(_names):
            env[nm] = x[..., i]
        return np.broadcast_to(
            np.asarray(exprlang.evaluate_array(_e, env), dtype=float),
            x[..., 0].shape)

    hw = None
    if x_halfwidth is not None:
        hw = (x_halfwidth if callable(x_halfwidth)
              else (lambda a, _h=float(x_halfwidth): _h))
    return SystemModel(name=name, n_x=n_x, rhs=rhs, v_fn=v_fn, params=params,
                       rhs_exprs=exprs, x_halfwidth=hw)


# ---------------------------------------------------------------------------
# Integrators
# ---------------------------------------------------------------------------

def _attach_domain(t, states, sys, domain):
    V = sys.v_of_state(states)
    if domain is None:
        return V, None, None
    psi_V = np.asarray(domain.boundary.psi(V), dtype=float)
    lam = states[:, -1]
    tol = _MONITOR_TOL * (1.0 + np.abs(lam))
    inside = inside_with_tol(domain, V, lam, tol)
    exit_time = None if bool(np.all(inside)) else float(t[int(np.argmin(inside))])
    return V, psi_V, exit_time


def inside_with_tol(domain, V, lam, tol):
    psi_V = np.asarray(domain.boundary.psi(V), dtype=float)
    if domain.kind == "bounded":
        return ((V <= domain.a + tol) & (lam >= psi_V - tol)
                & (lam <= domain.psi_a + tol))
    return (V <= domain.a + tol) & (lam <= psi_V - domain.epsilon + tol)


def integrate(sys, init, cfg, domain=None):
    """Integrate one trajectory; returns a Trajectory with V samples (and
    psi(V) plus exit detection when a domain is attached)."""
    y0 = np.asarray(init, dtype=float)
    if y0.shape != (sys.dim,):
        raise ValueError(f"initial state must have shape ({sys.dim},)")
    if not np.all(np.isfinite(y0)):
        raise ValueError("initial state must be finite")
    if cfg.method == "rk4-fixed":
        t, states, events = _rk4_single(sys, y0, cfg)
    else:
        t, states, events = _dopri_single(sys, y0, cfg)
    V, psi_V, exit_time = _attach_domain(t, states, sys, domain)
    events = TrajectoryEvents(exit_time=exit_time,
                              blowup_time=events.blowup_time,
                              blowup_kind=events.blowup_kind,
                              lambda_limit=events.lambda_limit)
    return Trajectory(t=t, states=states, V=V, psi_V=psi_V, events=events)


def _rk4_step(rhs, t, y, h):
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def _rk4_single(sys, y0, cfg):
    t_all, states_all, valid_len, blow_t, blow_kind = \
        _rk4_batch_core(sys, y0[None, :], cfg)
    n = int(valid_len[0])
    t = t_all[:n]
    states = states_all[:n, 0, :]
    lam_limit = float(states[-1, -1]) if blow_kind[0] is None else None
    events = TrajectoryEvents(blowup_time=blow_t[0], blowup_kind=blow_kind[0],
                              lambda_limit=lam_limit)
    return t, states, events


def _rk4_batch_core(sys, inits, cfg):
    """Vectorized fixed-step RK4 over a batch with per-sample blow-up freeze.

    Every step is recorded (fixed-step batches are the bulk-trial path and
    invariance is checked at sample times).  Returns (t, states, valid_len,
    blowup_time, blowup_kind): states has shape (n_rec, m, d) and
    valid_len[i] counts the leading records that belong to sample i; frozen
    samples just repeat their last valid state afterwards.  A record whose
    norm crossed ``blowup_norm`` but stayed finite is kept as the final
    valid sample of its trajectory; a non-finite step is discarded.
    """
    h = cfg.h
    m, _ = inits.shape
    n_full = int(math.floor(cfg.t_end / h + 1e-9))
    rem = cfg.t_end - n_full * h
    steps = [h] * n_full + ([rem] if rem > 1e-12 else [])

    def rhs(tt, yy):
        return np.asarray(sys.rhs(tt, yy), dtype=float)

    recs_t = [0.0]
    recs_y = [inits.copy()]
    y = inits.copy()
    active = np.ones(m, dtype=bool)
    blow_t = [None] * m
    blow_kind = [None] * m
    valid_len = np.ones(m, dtype=int)

    t = 0.0
    for i, hi in enumerate(steps):
        t_next = min((i + 1) * h, cfg.t_end)
        idx = np.flatnonzero(active)
        y_new = _rk4_step(rhs, t, y[idx], hi)
        finite = np.all(np.isfinite(y_new), axis=-1)
        with np.errstate(over="ignore", invalid="ignore"):
            norm = np.sqrt(np.sum(np.where(np.isfinite(y_new), y_new, 0.0) ** 2,
                                  axis=-1))
        blown = finite & (norm > cfg.blowup_norm)
        y[idx[finite]] = y_new[finite]

        advanced = np.zeros(m, dtype=bool)
        advanced[idx[finite]] = True
        for j in idx[~finite]:
            blow_t[j], blow_kind[j] = t_next, BLOWUP_NORM
        for j in idx[blown]:
            blow_t[j], blow_kind[j] = t_next, BLOWUP_NORM
        active[idx[~finite]] = False
        active[idx[blown]] = False

        t = t_next
        recs_t.append(t)
        recs_y.append(y.copy())
        valid_len += advanced.astype(int)
        if not np.any(active):
            break

    t_arr = np.asarray(recs_t)
    states = np.stack(recs_y, axis=0)
    return t_arr, states, valid_len, blow_t, blow_kind


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784,
                   11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                   -92097 / 339200, 187 / 2100, 1 / 40])


def _dopri_single(sys, y0, cfg):
    rhs = lambda tt, yy: np.asarray(sys.rhs(tt, yy), dtype=float)
    t = 0.0
    y = y0.copy()
    h = min(1e-2, cfg.t_end / 10.0)
    recs_t = [0.0]
    recs_y = [y.copy()]
    blow_time = None
    blow_kind = None
    n_accepted = 0

    for _ in range(cfg.max_steps):
        if t >= cfg.t_end:
            break
        h = min(h, cfg.t_end - t)
        if h < cfg.min_step:
            blow_time, blow_kind = t, BLOWUP_STEP
            break
        k = np.empty((7, y.size))
        ok = True
        for s in range(7):
            ys = y + h * (k[:s].T @ _DP_A[s]) if s else y
            k[s] = rhs(t + _DP_C[s] * h, ys)
            if not np.all(np.isfinite(k[s])):
                ok = False
                break
        if ok:
            y5 = y + h * (_DP_B5 @ k)
            y4 = y + h * (_DP_B4 @ k)
            if np.all(np.isfinite(y5)):
                scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y5))
                err = math.sqrt(float(np.mean(((y5 - y4) / scale) ** 2)))
            else:
                err = math.inf
        else:
            err = math.inf
        if err <= 1.0:
            t += h
            y = y5
            n_accepted += 1
            if (n_accepted % cfg.record_every == 0) or t >= cfg.t_end:
                recs_t.append(t)
                recs_y.append(y.copy())
            norm = float(np.linalg.norm(y))
            if norm > cfg.blowup_norm:
                blow_time, blow_kind = t, BLOWUP_NORM
                break
        if err == math.inf:
            factor = 0.2
        else:
            factor = cfg.safety * (max(err, 1e-16)) ** (-0.2)
        h *= min(cfg.max_growth, max(0.2, factor))

    else:
        raise IntegrationError(f"max_steps={cfg.max_steps} exhausted at t={t}")

    if recs_t[-1] < t and np.all(np.isfinite(y)):
        recs_t.append(t)
        recs_y.append(y.copy())
    lam_limit = float(y[-1]) if blow_kind is None and t >= cfg.t_end else None
    events = TrajectoryEvents(blowup_time=blow_time, blowup_kind=blow_kind,
                              lambda_limit=lam_limit)
    return np.asarray(recs_t), np.stack(recs_y, axis=0), events


def integrate_batch(sys, inits, cfg, domain=None):
    """Integrate a batch of initial states; returns a list of Trajectory in
    input order.  Fixed-step batches are advanced together (vectorized);
    adaptive batches fall back to per-sample integration, parallelized over
    at most INVARLAB_THREADS workers with index-ordered aggregation."""
    inits = np.asarray(inits, dtype=float)
    if inits.ndim != 2 or inits.shape[1] != sys.dim:
        raise ValueError(f"inits must have shape (m, {sys.dim})")
    if cfg.method == "rk4-fixed":
        t, states, valid_len, blow_t, blow_kind = _rk4_batch_core(sys, inits, cfg)
        out = []
        for i in range(inits.shape[0]):
            n = int(valid_len[i])
            ti = t[:n]
            si = states[:n, i, :]
            lam_limit = (float(si[-1, -1])
                         if blow_kind[i] is None and ti[-1] >= cfg.t_end else None)
            ev = TrajectoryEvents(blowup_time=blow_t[i], blowup_kind=blow_kind[i],
                                  lambda_limit=lam_limit)
            V, psi_V, exit_time = _attach_domain(ti, si, sys, domain)
            ev = TrajectoryEvents(exit_time=exit_time, blowup_time=ev.blowup_time,
                                  blowup_kind=ev.blowup_kind,
                                  lambda_limit=ev.lambda_limit)
            out.append(Trajectory(t=ti, states=si, V=V, psi_V=psi_V, events=ev))
        return out

    workers = os.environ.get("INVARLAB_THREADS")
    workers = int(workers) if workers else min(4, os.cpu_count() or 1)
    if workers <= 1 or inits.shape[0] == 1:
        return [integrate(sys, inits[i], cfg, domain)
                for i in range(inits.shape[0])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(integrate, sys, inits[i], cfg, domain)
                for i in range(inits.shape[0])]
        return [f.result() for f in futs]


# ---------------------------------------------------------------------------
# Monitoring and batch trials
# ---------------------------------------------------------------------------

def monitor(traj, dom):
    """Check a trajectory against a domain at its sample times.

    stayed uses the relative tolerance 1e-6*(1+|lambda|) per sample;
    lambda_monotone allows 1e-9 slack per step; min_dist_origin is over the
    full (x, lambda) state.
    """
    if traj.V is None:
        raise ValueError("trajectory carries no V samples")
    lam = traj.lam
    tol = _MONITOR_TOL * (1.0 + np.abs(lam))
    inside = inside_with_tol(dom, traj.V, lam, tol)
    stayed = bool(np.all(inside))
    first_exit = None if stayed else float(traj.t[int(np.argmin(inside))])
    lambda_monotone = bool(np.all(np.diff(lam) <= _LAMBDA_SLACK))
    x_final_norm = float(np.linalg.norm(traj.x[-1]))
    dist = np.sqrt(np.sum(traj.x ** 2, axis=1) + lam ** 2)
    return MonitorReport(stayed=stayed, first_exit=first_exit,
                         lambda_monotone=lambda_monotone,
                         x_final_norm=x_final_norm,
                         min_dist_origin=float(np.min(dist)))


def _sample_domain(sys, dom, n_samples, rng, x_halfwidth, lambda_floor):
    hw_fn = sys.x_halfwidth
    if x_halfwidth is not None:
        hw = float(x_halfwidth)
    elif hw_fn is not None:
        hw = float(hw_fn(dom.a))
    else:
        raise ValueError("system has no x-box helper; pass x_halfwidth")
    psi_a = dom.psi_a
    if dom.kind == "bounded":
        lam_lo, lam_hi = 0.0, psi_a
    else:
        lam_lo = (-(dom.epsilon + abs(psi_a)) if lambda_floor is None
                  else float(lambda_floor))
        lam_hi = psi_a - dom.epsilon
    if not lam_hi >= lam_lo:
        raise ValueError("empty lambda box for sampling")

    out = np.empty((n_samples, sys.dim))
    got = 0
    drawn = 0
    chunk = 1024
    while got < n_samples:
        if drawn >= 1_000_000:
            raise ValueError("rejection sampling failed after 1e6 draws; "
                             "domain appears empty")
        u = rng.random((chunk, sys.dim))
        drawn += chunk
        x = (2.0 * u[:, :sys.n_x] - 1.0) * hw
        lam = lam_lo + u[:, sys.n_x] * (lam_hi - lam_lo)
        V = np.asarray(sys.v_fn(x), dtype=float)
        ok = membership_array(dom, V, lam)
        idx = np.flatnonzero(ok)
        take = idx[:n_samples - got]
        out[got:got + take.size, :sys.n_x] = x[take]
        out[got:got + take.size, sys.n_x] = lam[take]
        got += take.size
    return out


def batch_membership_trial(sys, dom, n_samples, seed, cfg,
                           x_halfwidth=None, lambda_floor=None):
    """Sample initial points uniformly in the domain (rejection sampling
    over its bounding box), integrate each, and aggregate monitor reports.
    Deterministic for fixed (seed, cfg): the draw order, integration and
    aggregation order are all fixed."""
    if n_samples == 0:
        return TrialSummary(n_samples=0, seed=seed, n_stayed=0,
                            n_lambda_monotone=0, max_x_final_norm=0.0,
                            min_dist_origin=math.inf,
                            notes=("empty trial",))
    rng = np.random.Generator(np.random.PCG64(seed))
    inits = _sample_domain(sys, dom, n_samples, rng, x_halfwidth, lambda_floor)
    trajs = integrate_batch(sys, inits, cfg, domain=dom)
    reports = tuple(monitor(tr, dom) for tr in trajs)
    notes = []
    n_blow = sum(1 for tr in trajs if tr.events.blowup_kind is not None)
    if n_blow:
        notes.append(f"{n_blow} trajectories flagged as finite-escape suspects")
    return TrialSummary(
        n_samples=n_samples, seed=seed,
        n_stayed=sum(r.stayed for r in reports),
        n_lambda_monotone=sum(r.lambda_monotone for r in reports),
        max_x_final_norm=max(r.x_final_norm for r in reports),
        min_dist_origin=min(r.min_dist_origin for r in reports),
        reports=reports, notes=tuple(notes))
