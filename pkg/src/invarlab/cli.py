"""Command-line entry point.

Single executable with subcommands ``check``, ``sweep``, ``envelope``,
``synthesize``, ``simulate`` and ``reproduce``.  All analysis input comes
from one JSON config; results go to ``--out`` as a ``report.json`` plus CSV
data files (UTF-8, LF endings), written atomically.

Exit codes: 0 success / certificate passes, 2 certificate or reproduction
check fails (a valid analytic outcome), 1 tool or config error.

Config layout (sections used depend on the subcommand; unknown keys are
rejected with a JSON-pointer path)::

    {
      "version": 1,
      "bounds":      {"params": {..}, "alpha_lower": "s^2", "alpha_upper":
                      "s^2", "alpha": "-2*k*V", "beta": "2*V^(3/2)",
                      "phi": "s", "delta": "gamma*s^2", "xi": "0",
                      "v_max": 10.0},
      "boundary":    {"family": "linear", "p": 1.0}
                     | {"family": "sqrt", "r": 0.5}
                     | {"family": "expression", "psi": "p*V",
                        "params": {..}, "derivative": "symbolic"},
      "certificate": {"kind": "lemma1", "a": 0.9 | "max", "grid_n": 4096,
                      "slack": 0.0, "epsilon": 0.0, "a_hi": 5.0,
                      "tol": 1e-7, "lipschitz": null},
      "sweep":       {"p_lo": 0.06, "p_hi": 60.0, "n": 64, "grid_n": 1024,
                      "x_nodes": 512, "a_hi": null, "tol": 1e-7},
      "envelope":    {"f": "sqrt(y)", "var": "y", "params": {}, "lo": 0.0,
                      "hi": 1.0, "base": 0.0, "kind": "star", "tol": 1e-8,
                      "n0": 8, "out_n": 4096},
      "synthesis":   {"alpha0": "...", "beta": "...", "phi": "s",
                      "var": "V", "params": {}, "phi_lipschitz": 1.0,
                      "a_init": 2e-5, "envelope_kind": "star",
                      "grid_n": 4096},
      "system":      {"builtin": "prototype", "params": {"k": 1.0,
                      "gamma": 0.1}}
                     | {"rhs": ["-k*x1 + x1^2*lambda", "-gamma*x1^2"],
                        "V": "x1^2", "params": {..}, "x_halfwidth": 1.0},
      "simulation":  {"initial": [[..], ..] | "sampler": {"n_samples": 100,
                      "lambda_floor": null, "x_halfwidth": null},
                      "domain": {"kind": "bounded", "a": 0.9,
                      "epsilon": 0.0, "boundary": {..}},
                      "step": {"method": "rk4-fixed", "h": 0.01,
                      "t_end": 50.0, ..}},
      "output":      {"dir": null, "formats": ["json", "csv"]}
    }

Bound expressions use variable ``V`` for functions of V (alpha, beta) and
``s`` for functions of a norm or of |lambda| (alpha_lower, alpha_upper,
phi, delta, xi).  The environment variable INVARLAB_THREADS caps the
worker count used by adaptive batch simulation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .bounds_core import BoundSet, ScalarFn, StableBoundSet, UnstableBoundSet, \
    validate_bounds
from .certificates import (BoundaryCandidate, CertificateProblem, SmallGainData,
                           escape_margin, lemma1_margin, lemma2_margin,
                           max_feasible_a, smallgain_bound)
from .domain_estimator import (InvarianceDomain, SynthesisError, escape_p_range,
                               prototype_bounds, sweep_linear_cones,
                               synthesize_tuning_law)
from .ode_lab import (StepConfig, batch_membership_trial, builtin,
                      from_expressions, inside_with_tol, integrate, monitor)
from .star_envelope import convex_env, star_env

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CERT_FAIL = 2


class ConfigError(Exception):
    """Config validation failure; message carries a JSON-pointer-ish path."""


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

_TOP_KEYS = {"version", "bounds", "boundary", "certificate", "sweep",
             "envelope", "synthesis", "system", "simulation", "output"}


def _load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"/: invalid JSON ({exc})") from None
    _check_keys(cfg, "", required=("version",), optional=_TOP_KEYS - {"version"})
    return cfg


def _check_keys(obj, path, required=(), optional=()):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path or '/'}: expected an object")
    for key in obj:
        if key not in required and key not in optional:
            raise ConfigError(f"{path}/{key}: unknown key")
    for key in required:
        if key not in obj:
            raise ConfigError(f"{path or '/'}: missing required key '{key}'")


def _section(cfg, name):
    if name not in cfg:
        raise ConfigError(f"/{name}: section required for this command")
    return cfg[name]


def _num(obj, path, key, default=None, required=False):
    if key not in obj:
        if required:
            raise ConfigError(f"{path}: missing required key '{key}'")
        return default
    v = obj[key]
    if v is None and not required:
        return default
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ConfigError(f"{path}/{key}: expected a number")
    return float(v)


def _expr(obj, path, key, var, params):
    if key not in obj:
        raise ConfigError(f"{path}: missing required key '{key}'")
    if not isinstance(obj[key], str):
        raise ConfigError(f"{path}/{key}: expected an expression string")
    try:
        return ScalarFn.from_string(obj[key], var=var, params=params)
    except Exception as exc:
        raise ConfigError(f"{path}/{key}: {exc}") from None


def _params_of(obj, path):
    params = obj.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError(f"{path}/params: expected an object")
    for k, v in params.items():
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ConfigError(f"{path}/params/{k}: expected a number")
    return {k: float(v) for k, v in params.items()}


def _bounds_from_config(sec, a_hint=None):
    path = "/bounds"
    _check_keys(sec, path,
                required=("alpha_lower", "alpha_upper", "alpha", "beta",
                          "phi", "delta", "xi"),
                optional=("params", "v_max"))
    params = _params_of(sec, path)
    stable = StableBoundSet(
        alpha_lower=_expr(sec, path, "alpha_lower", "s", params),
        alpha_upper=_expr(sec, path, "alpha_upper", "s", params),
        alpha=_expr(sec, path, "alpha", "V", params),
        beta=_expr(sec, path, "beta", "V", params),
        phi=_expr(sec, path, "phi", "s", params),
    )
    unstable = UnstableBoundSet(
        delta=_expr(sec, path, "delta", "s", params),
        xi=_expr(sec, path, "xi", "s", params),
    )
    v_max = _num(sec, path, "v_max")
    if v_max is None:
        v_max = 10.0 * a_hint if a_hint else 10.0
    return BoundSet(stable=stable, unstable=unstable, v_max=v_max)


def _boundary_from_config(sec, path="/boundary"):
    _check_keys(sec, path, required=("family",),
                optional=("p", "r", "psi", "var", "params", "derivative"))
    family = sec["family"]
    if family == "linear":
        return BoundaryCandidate.linear(_num(sec, path, "p", required=True))
    if family == "sqrt":
        return BoundaryCandidate.sqrt(_num(sec, path, "r", required=True))
    if family == "expression":
        params = _params_of(sec, path)
        fn = _expr(sec, path, "psi", sec.get("var", "V"), params)
        mode = sec.get("derivative", "symbolic")
        if mode not in ("symbolic", "fd"):
            raise ConfigError(f"{path}/derivative: expected 'symbolic' or 'fd'")
        return BoundaryCandidate.from_scalar_fn(fn, derivative=mode)
    raise ConfigError(f"{path}/family: unknown family {family!r}")


def _step_from_config(sec, path="/simulation/step"):
    _check_keys(sec, path, required=("method", "t_end"),
                optional=("h", "rtol", "atol", "max_steps", "blowup_norm",
                          "min_step", "record_every"))
    kwargs = {"method": sec["method"], "t_end": _num(sec, path, "t_end",
                                                     required=True)}
    for key in ("h", "rtol", "atol", "blowup_norm", "min_step"):
        v = _num(sec, path, key)
        if v is not None:
            kwargs[key] = v
    for key in ("max_steps", "record_every"):
        if key in sec:
            kwargs[key] = int(sec[key])
    try:
        return StepConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _system_from_config(sec, synthesis=None):
    path = "/system"
    _check_keys(sec, path, optional=("builtin", "params", "rhs", "V",
                                     "x_halfwidth"))
    if "builtin" in sec:
        params = dict(sec.get("params", {}))
        if sec["builtin"] == "regulation":
            if synthesis is None:
                raise ConfigError(f"{path}: builtin 'regulation' needs a "
                                  "/synthesis section in the same config")
            params["synthesis"] = synthesis
        try:
            return builtin(sec["builtin"], params)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if "rhs" not in sec or "V" not in sec:
        raise ConfigError(f"{path}: need either 'builtin' or 'rhs' + 'V'")
    params = _params_of(sec, path)
    return from_expressions(sec["rhs"], sec["V"], params=params,
                            x_halfwidth=sec.get("x_halfwidth"))


def _domain_from_config(sec, path="/simulation/domain"):
    _check_keys(sec, path, required=("kind", "a", "boundary"),
                optional=("epsilon",))
    boundary = _boundary_from_config(sec["boundary"], path=f"{path}/boundary")
    return InvarianceDomain(kind=sec["kind"], boundary=boundary,
                            a=_num(sec, path, "a", required=True),
                            epsilon=_num(sec, path, "epsilon", default=0.0))


# ---------------------------------------------------------------------------
# Output plumbing
# ---------------------------------------------------------------------------

def _atomic_write(path, data_bytes):
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data_bytes)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"
    _atomic_write(path, text.encode("utf-8"))


def write_csv(path, header, rows):
    import io
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def config_hash(cfg):
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(canon.encode("utf-8")).hexdigest()


def trajectory_rows(traj, n_x, domain=None):
    rows = []
    in_dom = None
    if domain is not None and traj.V is not None:
        lam = traj.lam
        tol = 1e-6 * (1.0 + np.abs(lam))
        in_dom = inside_with_tol(domain, traj.V, lam, tol)
    for i in range(traj.t.size):
        row = [traj.t[i]] + [traj.states[i, j] for j in range(n_x)] \
            + [traj.states[i, n_x]]
        row.append(traj.V[i] if traj.V is not None else "")
        row.append(traj.psi_V[i] if traj.psi_V is not None else "")
        row.append(int(in_dom[i]) if in_dom is not None else "")
        rows.append(row)
    return rows


def _traj_header(n_x):
    return ["t"] + [f"x{i + 1}" for i in range(n_x)] + ["lambda", "V",
                                                        "psi_V", "in_domain"]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_check(cfg, out_dir, args):
    sec = _section(cfg, "certificate")
    _check_keys(sec, "/certificate", required=("kind",),
                optional=("a", "grid_n", "slack", "epsilon", "a_hi", "tol",
                          "lipschitz"))
    kind = sec["kind"]
    if kind not in ("lemma1", "lemma2", "escape"):
        raise ConfigError(f"/certificate/kind: unknown kind {kind!r}")
    a_raw = sec.get("a", "max")
    want_max = a_raw == "max"
    if want_max and kind == "escape":
        raise ConfigError("/certificate/a: 'max' applies to boundedness "
                          "certificates only")
    a_hint = None if want_max else _num(sec, "/certificate", "a", required=True)
    a_hi = _num(sec, "/certificate", "a_hi", default=None)
    bounds = _bounds_from_config(_section(cfg, "bounds"),
                                 a_hint=a_hint or a_hi)
    violations = validate_bounds(bounds)
    if violations:
        raise ConfigError("/bounds: inadmissible bound set: "
                          + "; ".join(violations))
    boundary = _boundary_from_config(_section(cfg, "boundary"))
    grid_n = args.grid or int(sec.get("grid_n", 4096))
    slack = _num(sec, "/certificate", "slack", default=0.0)
    epsilon = _num(sec, "/certificate", "epsilon", default=0.0)
    lipschitz = _num(sec, "/certificate", "lipschitz", default=None)
    payload = {"kind": kind, "bounds_admissible": True}

    margin_fn = {"lemma1": lemma1_margin, "lemma2": lemma2_margin,
                 "escape": escape_margin}[kind]
    if want_max:
        tol = _num(sec, "/certificate", "tol", default=1e-7)
        a_hi = a_hi if a_hi is not None else bounds.v_max
        probe = CertificateProblem(bounds=bounds, boundary=boundary,
                                   a=min(a_hi, bounds.v_max), epsilon=0.0)
        a_star = max_feasible_a(probe, kind, a_hi=min(a_hi, bounds.v_max),
                                tol=tol, grid_n=grid_n, slack=slack)
        payload["a_star"] = a_star
        if a_star <= 0.0:
            payload["verdict"] = None
            payload["note"] = "no feasible interval cap found"
            return payload, EXIT_CERT_FAIL
        prob = CertificateProblem(bounds=bounds, boundary=boundary, a=a_star,
                                  epsilon=0.0)
    else:
        prob = CertificateProblem(bounds=bounds, boundary=boundary, a=a_hint,
                                  epsilon=epsilon)
    verdict = margin_fn(prob, grid_n=grid_n, slack=slack, lipschitz=lipschitz)
    payload["verdict"] = verdict.as_dict()
    return payload, EXIT_OK if verdict.passes else EXIT_CERT_FAIL


def _cmd_sweep(cfg, out_dir, args):
    sec = _section(cfg, "sweep")
    _check_keys(sec, "/sweep", required=("p_lo", "p_hi", "n"),
                optional=("grid_n", "x_nodes", "a_hi", "tol", "slack"))
    bounds = _bounds_from_config(_section(cfg, "bounds"))
    violations = validate_bounds(bounds)
    if violations:
        raise ConfigError("/bounds: inadmissible bound set: "
                          + "; ".join(violations))
    sweep = sweep_linear_cones(
        bounds,
        p_lo=_num(sec, "/sweep", "p_lo", required=True),
        p_hi=_num(sec, "/sweep", "p_hi", required=True),
        n=int(sec["n"]),
        grid_n=args.grid or int(sec.get("grid_n", 1024)),
        slack=_num(sec, "/sweep", "slack", default=0.0),
        a_hi=_num(sec, "/sweep", "a_hi", default=None),
        tol=_num(sec, "/sweep", "tol", default=1e-7),
        x_nodes=int(sec.get("x_nodes", 512)))
    write_csv(os.path.join(out_dir, "cones.csv"), ["p", "a"],
              zip(sweep.p_values.tolist(), sweep.a_of_p.tolist()))
    write_csv(os.path.join(out_dir, "union.csv"), ["x", "lambda_min"],
              zip(sweep.x_nodes.tolist(), sweep.lambda_min.tolist()))
    payload = sweep.as_dict()
    payload["files"] = ["cones.csv", "union.csv"]
    return payload, EXIT_OK


def _cmd_envelope(cfg, out_dir, args):
    sec = _section(cfg, "envelope")
    _check_keys(sec, "/envelope", required=("f", "lo", "hi"),
                optional=("var", "params", "base", "kind", "tol", "n0",
                          "out_n"))
    params = _params_of(sec, "/envelope")
    fn = _expr(sec, "/envelope", "f", sec.get("var", "y"), params)
    lo = _num(sec, "/envelope", "lo", required=True)
    hi = _num(sec, "/envelope", "hi", required=True)
    kind = sec.get("kind", "star")
    out_n = args.grid or int(sec.get("out_n", 4096))
    if kind == "star":
        report = star_env(fn, _num(sec, "/envelope", "base", default=0.0),
                          (lo, hi), tol=_num(sec, "/envelope", "tol",
                                             default=1e-8),
                          n0=int(sec.get("n0", 8)), out_n=out_n)
        grid = report.envelope
        payload = {"kind": "star", "iterations": report.iterations,
                   "sup_norm_deltas": list(report.sup_norm_deltas),
                   "converged": report.converged,
                   "base_point": report.base_point,
                   "notes": list(report.notes)}
    elif kind == "convex":
        grid = convex_env(fn, (lo, hi), n=out_n)
        payload = {"kind": "convex"}
    else:
        raise ConfigError(f"/envelope/kind: unknown kind {kind!r}")
    write_csv(os.path.join(out_dir, "envelope.csv"), ["node", "value"],
              grid.rows())
    payload["files"] = ["envelope.csv"]
    return payload, EXIT_OK


def _run_synthesis(cfg, grid_override=None):
    sec = _section(cfg, "synthesis")
    _check_keys(sec, "/synthesis",
                required=("alpha0", "beta", "phi", "phi_lipschitz", "a_init"),
                optional=("var", "params", "envelope_kind", "grid_n"))
    params = _params_of(sec, "/synthesis")
    var = sec.get("var", "V")
    return synthesize_tuning_law(
        alpha0=_expr(sec, "/synthesis", "alpha0", var, params),
        beta=_expr(sec, "/synthesis", "beta", var, params),
        phi=_expr(sec, "/synthesis", "phi", "s", params),
        phi_lipschitz=_num(sec, "/synthesis", "phi_lipschitz", required=True),
        a_init=_num(sec, "/synthesis", "a_init", required=True),
        envelope_kind=sec.get("envelope_kind", "star"),
        grid_n=grid_override or int(sec.get("grid_n", 4096)))


def _cmd_synthesize(cfg, out_dir, args):
    try:
        res = _run_synthesis(cfg, grid_override=args.grid)
    except SynthesisError as exc:
        return {"error": str(exc),
                "attempts": [{"a": a, "margin_max": m}
                             for a, m in exc.attempts]}, EXIT_CERT_FAIL
    write_csv(os.path.join(out_dir, "psi.csv"), ["node", "value"],
              res.psi.rows())
    nodes = res.psi.nodes
    write_csv(os.path.join(out_dir, "gamma.csv"), ["node", "value"],
              zip(nodes.tolist(),
                  np.asarray(res.gamma_fn(nodes), dtype=float).tolist()))
    payload = {"a_star": res.a_star, "D_a": res.D_a,
               "gamma0": res.gamma0.text,
               "verdict": res.verdict.as_dict(),
               "notes": list(res.notes),
               "files": ["psi.csv", "gamma.csv"]}
    return payload, EXIT_OK


def _cmd_simulate(cfg, out_dir, args):
    sec = _section(cfg, "simulation")
    _check_keys(sec, "/simulation", required=("step",),
                optional=("initial", "sampler", "domain"))
    synthesis = None
    system_sec = _section(cfg, "system")
    if system_sec.get("builtin") == "regulation":
        synthesis = _run_synthesis(cfg)
    sys_model = _system_from_config(system_sec, synthesis=synthesis)
    step = _step_from_config(sec["step"])
    domain = (_domain_from_config(sec["domain"]) if "domain" in sec else None)

    payload = {"system": sys_model.name, "method": step.method}
    code = EXIT_OK
    if "sampler" in sec:
        if domain is None:
            raise ConfigError("/simulation/sampler: needs /simulation/domain")
        sm = sec["sampler"]
        _check_keys(sm, "/simulation/sampler", required=("n_samples",),
                    optional=("lambda_floor", "x_halfwidth"))
        summary = batch_membership_trial(
            sys_model, domain, int(sm["n_samples"]), seed=args.seed, cfg=step,
            x_halfwidth=_num(sm, "/simulation/sampler", "x_halfwidth"),
            lambda_floor=_num(sm, "/simulation/sampler", "lambda_floor"))
        payload["summary"] = summary.as_dict()
        if domain.kind == "bounded" and summary.n_stayed < summary.n_samples:
            code = EXIT_CERT_FAIL
    elif "initial" in sec:
        reports = []
        for i, init in enumerate(sec["initial"]):
            traj = integrate(sys_model, np.asarray(init, dtype=float), step,
                             domain=domain)
            write_csv(os.path.join(out_dir, f"trajectory_{i:03d}.csv"),
                      _traj_header(sys_model.n_x),
                      trajectory_rows(traj, sys_model.n_x, domain=domain))
            entry = {"initial": list(map(float, init)),
                     "events": {"exit_time": traj.events.exit_time,
                                "blowup_time": traj.events.blowup_time,
                                "blowup_kind": traj.events.blowup_kind,
                                "lambda_limit": traj.events.lambda_limit}}
            if domain is not None:
                rep = monitor(traj, domain)
                entry["monitor"] = rep.as_dict()
                if domain.kind == "bounded" and not rep.stayed:
                    code = EXIT_CERT_FAIL
            reports.append(entry)
        payload["trajectories"] = reports
    else:
        raise ConfigError("/simulation: need 'initial' or 'sampler'")
    return payload, code


# ---------------------------------------------------------------------------
# reproduce targets
# ---------------------------------------------------------------------------

def _closed_form_a(p, k, gamma):
    return ((1.0 / p) * (k - gamma / (2.0 * p))) ** (2.0 / 3.0) \
        if p > gamma / (2.0 * k) else 0.0


def _reproduce_example3(out_dir, seed, grid):
    k, gamma = 1.0, 0.1
    bounds = prototype_bounds(k, gamma, v_max=10.0)
    checks = []
    rows = []
    for p in (0.3, 1.0, 3.0, 20.0, 0.05):
        prob = CertificateProblem(bounds=bounds,
                                  boundary=BoundaryCandidate.linear(p),
                                  a=5.0, epsilon=0.0)
        a1 = max_feasible_a(prob, "lemma1", a_hi=5.0, tol=1e-7, grid_n=1024)
        a2 = max_feasible_a(prob, "lemma2", a_hi=5.0, tol=1e-7, grid_n=1024)
        ref = _closed_form_a(p, k, gamma)
        rows.append([p, a1, a2, ref])
        checks.append({"name": f"feasible cap at p={p}",
                       "pass": abs(a1 - ref) <= 1e-6,
                       "detail": {"a_grid": a1, "a_closed_form": ref}})
        checks.append({"name": f"derivative/ray certificate agreement at p={p}",
                       "pass": abs(a1 - a2) <= 1e-6,
                       "detail": {"a_lemma1": a1, "a_lemma2": a2}})
    write_csv(os.path.join(out_dir, "caps.csv"),
              ["p", "a_lemma1", "a_lemma2", "a_closed_form"], rows)
    sweep = sweep_linear_cones(bounds, p_lo=0.06, p_hi=60.0, n=33,
                               grid_n=1024, a_hi=5.0)
    write_csv(os.path.join(out_dir, "cones.csv"), ["p", "a"],
              zip(sweep.p_values.tolist(), sweep.a_of_p.tolist()))
    write_csv(os.path.join(out_dir, "union.csv"), ["x", "lambda_min"],
              zip(sweep.x_nodes.tolist(), sweep.lambda_min.tolist()))
    return {"checks": checks, "files": ["caps.csv", "cones.csv", "union.csv"]}


def _reproduce_escape(out_dir, seed, grid):
    k, gamma, eps = 1.0, 0.1, 0.1
    rng = escape_p_range(k, gamma, eps, crosscheck=True)
    checks = [{"name": "escape margin passes just under p_max and fails "
                       "just above",
               "pass": (rng.crosscheck["pass_at"]["pass"]
                        and not rng.crosscheck["fail_at"]["pass"]),
               "detail": rng.as_dict()}]
    p = rng.p_max * (1.0 - 1e-6)
    dom = InvarianceDomain(kind="escape",
                           boundary=BoundaryCandidate.linear(p), a=0.5,
                           epsilon=eps)
    sys_model = builtin("prototype", {"k": k, "gamma": gamma})
    step = StepConfig(method="rk4-fixed", h=0.01, t_end=50.0)
    summary = batch_membership_trial(sys_model, dom, 100, seed=seed, cfg=step)
    checks.append({"name": "100 escape-domain trajectories keep distance "
                           ">= eps/2 from the origin",
                   "pass": summary.min_dist_origin >= eps / 2.0,
                   "detail": {"min_dist_origin": summary.min_dist_origin}})
    return {"p_max": rng.p_max, "checks": checks,
            "summary": summary.as_dict()}


def _reproduce_smallgain(out_dir, seed, grid):
    tau1, c1, c2 = 1.0, 1.0, 0.2
    data = SmallGainData(k=2.0 * tau1, sigma=1.0, B=c1, p_lower=1.0,
                         p_upper=1.0, gamma=c2)
    res = smallgain_bound(data)
    prior = (1.0 / 16.0) * tau1 ** 2 / c1
    checks = [
        {"name": "admissible-gain bound equals tau1^2/(4 c1)",
         "pass": res.gamma_star == 0.25, "detail": res.as_dict()},
        {"name": "bound is exactly 4x the earlier small-gain bound",
         "pass": res.gamma_star / prior == 4.0,
         "detail": {"ratio": res.gamma_star / prior}},
        {"name": "probe gain c2=0.2 admissible", "pass": res.passes,
         "detail": {"c2": c2, "gamma_star": res.gamma_star}},
    ]
    sys_model = builtin("cascade_abs", {"tau1": tau1, "c1": c1, "c2": c2})
    dom = InvarianceDomain(kind="bounded",
                           boundary=BoundaryCandidate.sqrt(res.r_star), a=16.0)
    step = StepConfig(method="rk4-fixed", h=0.005, t_end=20.0)
    summary = batch_membership_trial(sys_model, dom, 25, seed=seed, cfg=step)
    checks.append({"name": "25 trajectories from the certified cone stay in it",
                   "pass": summary.n_stayed == summary.n_samples,
                   "detail": summary.as_dict()})
    return {"result": res.as_dict(), "checks": checks}


def _regulation_synthesis(a_init=2e-5, grid_n=4096):
    alpha0 = ScalarFn.from_string(
        "piecewise(V <= 0.5: 4*V^2, else: sqrt(2*V))", var="V")
    beta = ScalarFn.from_string("D*sqrt(2*V)*(2*V+1)", var="V",
                                params={"D": 1.0})
    phi = ScalarFn.from_string("s", var="s")
    return synthesize_tuning_law(alpha0, beta, phi, phi_lipschitz=1.0,
                                 a_init=a_init, envelope_kind="star",
                                 grid_n=grid_n)


def _reproduce_regulation(out_dir, seed, grid):
    res = _regulation_synthesis(grid_n=grid or 4096)
    checks = [{"name": "synthesis returns a positive certified cap",
               "pass": res.a_star > 0 and res.verdict.passes
               and res.verdict.margin_max <= 0.0,
               "detail": {"a_star": res.a_star,
                          "margin_max": res.verdict.margin_max}}]
    sys_model = builtin("regulation", {"theta": 0.3, "D": 1.0,
                                       "synthesis": res})
    dom = InvarianceDomain(kind="bounded",
                           boundary=BoundaryCandidate.from_grid(res.psi),
                           a=res.a_star)
    step = StepConfig(method="rk4-fixed", h=0.005, t_end=200.0)
    summary = batch_membership_trial(sys_model, dom, 20, seed=seed, cfg=step)
    checks.append({"name": "20 closed-loop trajectories regulate |x| below "
                           "1e-2 by t=200",
                   "pass": summary.max_x_final_norm < 1e-2,
                   "detail": {"max_x_final_norm": summary.max_x_final_norm}})
    write_csv(os.path.join(out_dir, "psi.csv"), ["node", "value"],
              res.psi.rows())
    return {"a_star": res.a_star, "checks": checks,
            "summary": summary.as_dict()}


_REPRODUCE = {"example3": _reproduce_example3, "escape": _reproduce_escape,
              "smallgain": _reproduce_smallgain,
              "regulation": _reproduce_regulation}


def _cmd_reproduce(target, out_dir, args):
    payload = _REPRODUCE[target](out_dir, args.seed, args.grid)
    ok = all(c["pass"] for c in payload["checks"])
    payload["target"] = target
    payload["all_pass"] = ok
    return payload, EXIT_OK if ok else EXIT_CERT_FAIL


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="invarlab",
        description="Positive-invariance certificates, envelopes, tuning-law "
                    "synthesis and simulation checks for scalar-unstable "
                    "cascades.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default="invarlab_out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--grid", type=int, default=None,
                       help="override grid resolution")
        p.add_argument("--quiet", action="store_true")

    for name in ("check", "sweep", "envelope", "synthesize", "simulate"):
        common(sub.add_parser(name))
    rep = sub.add_parser("reproduce")
    rep.add_argument("target", choices=sorted(_REPRODUCE))
    common(rep, needs_config=False)
    return parser


_COMMANDS = {"check": _cmd_check, "sweep": _cmd_sweep,
             "envelope": _cmd_envelope, "synthesize": _cmd_synthesize,
             "simulate": _cmd_simulate}


def run(argv=None):
    args = _build_parser().parse_args(argv)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    started = time.perf_counter()
    try:
        if args.command == "reproduce":
            cfg_echo = {"reproduce": args.target, "seed": args.seed}
            payload, code = _cmd_reproduce(args.target, out_dir, args)
        else:
            cfg_echo = _load_config(args.config)
            payload, code = _COMMANDS[args.command](cfg_echo, out_dir, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # surfaced verbatim per the error contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    report = {
        "command": args.command if args.command != "reproduce"
        else f"reproduce {args.target}",
        "config_hash": config_hash(cfg_echo),
        "tool_version": __version__,
        "payload": payload,
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    write_json(os.path.join(out_dir, "report.json"), report)
    if not args.quiet:
        status = {EXIT_OK: "pass", EXIT_CERT_FAIL: "FAIL"}[code]
        print(f"{report['command']}: {status} "
              f"(report: {os.path.join(out_dir, 'report.json')})")
    return code


def main():
    raise SystemExit(run())


if __name__ == "__main__":
    main()
