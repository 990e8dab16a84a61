import json
import math

import numpy as np
import pytest

from invarlab.certificates import BoundaryCandidate
from invarlab.domain_estimator import InvarianceDomain
from invarlab.ode_lab import (StepConfig, batch_membership_trial, builtin,
                              from_expressions, integrate, integrate_batch,
                              monitor)

K, GAMMA = 1.0, 0.1


def linear_decay_system():
    return from_expressions(["-x1", "0"], "x1^2", name="linear-test")


def bounded_domain(p=1.0, a=0.95):
    return InvarianceDomain(kind="bounded",
                            boundary=BoundaryCandidate.linear(p), a=a)


class TestIntegrate:
    def test_adaptive_linear_decay(self):
        sys_model = linear_decay_system()
        cfg = StepConfig(method="rk45-adaptive", rtol=1e-10, atol=1e-13,
                         t_end=1.0)
        traj = integrate(sys_model, np.array([1.0, 0.0]), cfg)
        assert traj.t[-1] == pytest.approx(1.0, abs=1e-12)
        assert traj.states[-1, 0] == pytest.approx(math.exp(-1.0), abs=1e-8)
        assert traj.events.blowup_time is None
        assert traj.events.lambda_limit == 0.0

    def test_rk4_fixed_order_of_convergence(self):
        sys_model = linear_decay_system()
        errors = []
        for h in (0.2, 0.1, 0.05):
            cfg = StepConfig(method="rk4-fixed", h=h, t_end=1.0)
            traj = integrate(sys_model, np.array([1.0, 0.0]), cfg)
            errors.append(abs(traj.states[-1, 0] - math.exp(-1.0)))
        for coarse, fine in zip(errors, errors[1:]):
            assert 12.0 <= coarse / fine <= 20.0

    def test_finite_escape_detected_near_closed_form(self):
        # frozen tuning state: dx = -x + 2x^2 from x0=1 blows up at ln 2
        sys_model = builtin("prototype", {"k": K, "gamma": 0.0})
        cfg = StepConfig(method="rk45-adaptive", t_end=2.0)
        traj = integrate(sys_model, np.array([1.0, 2.0]), cfg)
        assert traj.events.blowup_kind is not None
        assert traj.events.blowup_time == pytest.approx(math.log(2.0),
                                                        abs=5e-2)
        assert np.all(np.isfinite(traj.states))
        assert np.all(np.diff(traj.t) > 0)

    def test_lambda_nonincreasing_along_prototype_flow(self):
        sys_model = builtin("prototype", {"k": K, "gamma": GAMMA})
        cfg = StepConfig(method="rk4-fixed", h=0.01, t_end=20.0)
        traj = integrate(sys_model, np.array([0.7, 0.6]), cfg)
        assert np.all(np.diff(traj.lam) <= 0.0)

    def test_initial_state_validation(self):
        sys_model = linear_decay_system()
        cfg = StepConfig(method="rk4-fixed", h=0.1, t_end=1.0)
        with pytest.raises(ValueError):
            integrate(sys_model, np.array([1.0]), cfg)
        with pytest.raises(ValueError):
            integrate(sys_model, np.array([np.nan, 0.0]), cfg)


class TestBuiltins:
    def test_prototype_rhs_values(self):
        sys_model = builtin("prototype", {"k": 2.0, "gamma": 0.5})
        y = np.array([1.5, 0.4])
        dx, dlam = sys_model.rhs(0.0, y)
        assert dx == pytest.approx(-2.0 * 1.5 + 1.5 ** 2 * 0.4)
        assert dlam == pytest.approx(-0.5 * 1.5 ** 2)
        assert sys_model.v_of_state(y) == pytest.approx(1.5 ** 2)

    def test_cascade_probe_gain_between_bounds(self):
        tau1, c1, c2 = 1.0, 1.0, 0.2
        assert (1.0 / 16.0) * tau1 ** 2 / c1 < c2 < 0.25 * tau1 ** 2 / c1
        sys_model = builtin("cascade_abs", {"tau1": tau1, "c1": c1, "c2": c2})
        dx, dlam = sys_model.rhs(0.0, np.array([-2.0, 1.0]))
        assert dx == pytest.approx(2.0 + 1.0)
        assert dlam == pytest.approx(-0.4)

    def test_regulation_uses_saturated_cubic(self):
        from invarlab.bounds_core import ScalarFn
        from invarlab.domain_estimator import synthesize_tuning_law
        alpha0 = ScalarFn.from_string("4*V^2", var="V")
        beta = ScalarFn.from_string("sqrt(2*V)*(2*V+1)", var="V")
        phi = ScalarFn.from_string("s", var="s")
        synth = synthesize_tuning_law(alpha0, beta, phi, phi_lipschitz=1.0,
                                      a_init=0.1, grid_n=512)
        sys_model = builtin("regulation",
                            {"theta": 0.3, "D": 1.0, "synthesis": synth})
        # lambda = 0: compensation exact, dynamics reduce to -kappa(x)
        dx, _ = sys_model.rhs(0.0, np.array([2.0, 0.0]))
        assert dx == pytest.approx(-1.0)
        dx, _ = sys_model.rhs(0.0, np.array([0.5, 0.0]))
        assert dx == pytest.approx(-0.125)
        dx, _ = sys_model.rhs(0.0, np.array([-2.0, 0.0]))
        assert dx == pytest.approx(1.0)

    def test_missing_parameter(self):
        with pytest.raises(ValueError, match="missing parameter"):
            builtin("prototype", {"k": 1.0})
        with pytest.raises(ValueError, match="unknown builtin"):
            builtin("no_such_system", {})


class TestMonitor:
    def test_boundary_start_stays_and_decays(self):
        a = 0.9 * ((K - GAMMA / 2.0) ** (2.0 / 3.0))
        sys_model = builtin("prototype", {"k": K, "gamma": GAMMA})
        dom = bounded_domain(p=1.0, a=a / 0.9)
        x0 = math.sqrt(0.9 * dom.a)
        init = np.array([x0, 1.0 * x0 ** 2])  # on lambda = p V, V = 0.9 a
        cfg = StepConfig(method="rk4-fixed", h=0.01, t_end=50.0)
        traj = integrate(sys_model, init, cfg, domain=dom)
        rep = monitor(traj, dom)
        assert rep.stayed and rep.first_exit is None
        assert rep.lambda_monotone
        assert rep.x_final_norm < 1e-3
        # lambda trapped in [0, psi(a)] for a stayed trajectory
        assert np.all(traj.lam <= dom.psi_a + 1e-6 * (1 + np.abs(traj.lam)))
        assert np.all(traj.lam >= -1e-12)

    def test_escape_start_keeps_distance(self):
        eps = 0.1
        p = 0.047
        sys_model = builtin("prototype", {"k": K, "gamma": GAMMA})
        dom = InvarianceDomain(kind="escape",
                               boundary=BoundaryCandidate.linear(p), a=0.5,
                               epsilon=eps)
        init = np.array([0.5, p * 0.25 - 2.0 * eps])
        cfg = StepConfig(method="rk4-fixed", h=0.01, t_end=50.0)
        traj = integrate(sys_model, init, cfg, domain=dom)
        rep = monitor(traj, dom)
        assert rep.min_dist_origin >= eps / 2.0
        assert rep.lambda_monotone

    def test_exit_detected_for_point_outside(self):
        sys_model = builtin("prototype", {"k": K, "gamma": GAMMA})
        dom = bounded_domain(p=1.0, a=0.9)
        init = np.array([0.8, 0.1])  # lambda below psi(V): outside from t=0
        cfg = StepConfig(method="rk4-fixed", h=0.01, t_end=1.0)
        traj = integrate(sys_model, init, cfg, domain=dom)
        rep = monitor(traj, dom)
        assert not rep.stayed
        assert rep.first_exit == 0.0
        assert traj.events.exit_time == 0.0

    def test_requires_v_samples(self):
        sys_model = builtin("prototype", {"k": K, "gamma": GAMMA})
        cfg = StepConfig(method="rk4-fixed", h=0.1, t_end=0.5)
        traj = integrate(sys_model, np.array([0.1, 0.1]), cfg)
        bare = traj.__class__(t=traj.t, states=traj.states, V=None)
        with pytest.raises(ValueError):
            monitor(bare, bounded_domain())


class TestBatch:
    def test_batch_matches_single_bitwise(self):
        sys_model = builtin("prototype", {"k": K, "gamma": GAMMA})
        cfg = StepConfig(method="rk4-fixed", h=0.01, t_end=5.0)
        inits = np.array([[0.3, 0.2], [0.5, 0.4], [0.1, 0.9]])
        batch = integrate_batch(sys_model, inits, cfg)
        for i in range(3):
            single = integrate(sys_model, inits[i], cfg)
            assert np.array_equal(batch[i].states, single.states)

    def test_trial_deterministic(self):
        sys_model = builtin("prototype", {"k": K, "gamma": GAMMA})
        dom = bounded_domain(p=1.0, a=0.9)
        cfg = StepConfig(method="rk4-fixed", h=0.05, t_end=5.0)
        s1 = batch_membership_trial(sys_model, dom, 16, seed=42, cfg=cfg)
        s2 = batch_membership_trial(sys_model, dom, 16, seed=42, cfg=cfg)
        assert json.dumps(s1.as_dict(), sort_keys=True) \
            == json.dumps(s2.as_dict(), sort_keys=True)

    def test_trial_seed_changes_draws(self):
        sys_model = builtin("prototype", {"k": K, "gamma": GAMMA})
        dom = bounded_domain(p=1.0, a=0.9)
        cfg = StepConfig(method="rk4-fixed", h=0.05, t_end=2.0)
        s1 = batch_membership_trial(sys_model, dom, 8, seed=1, cfg=cfg)
        s2 = batch_membership_trial(sys_model, dom, 8, seed=2, cfg=cfg)
        assert s1.as_dict() != s2.as_dict()

    def test_empty_trial(self):
        sys_model = builtin("prototype", {"k": K, "gamma": GAMMA})
        s = batch_membership_trial(sys_model, bounded_domain(), 0, seed=0,
                                   cfg=StepConfig(method="rk4-fixed", h=0.1,
                                                  t_end=1.0))
        assert s.n_samples == 0 and "empty trial" in s.notes

    def test_rejection_failure_on_thin_domain(self):
        sys_model = builtin("prototype", {"k": K, "gamma": GAMMA})
        dom = bounded_domain(p=1.0, a=1e-12)
        cfg = StepConfig(method="rk4-fixed", h=0.1, t_end=1.0)
        with pytest.raises(ValueError, match="rejection sampling"):
            batch_membership_trial(sys_model, dom, 4, seed=0, cfg=cfg,
                                   x_halfwidth=1e6)

    def test_adaptive_batch_path(self):
        sys_model = builtin("prototype", {"k": K, "gamma": GAMMA})
        dom = bounded_domain(p=1.0, a=0.9)
        cfg = StepConfig(method="rk45-adaptive", t_end=2.0)
        s = batch_membership_trial(sys_model, dom, 4, seed=3, cfg=cfg)
        assert s.n_samples == 4 and s.n_stayed == 4

    def test_blowup_truncates_samples(self):
        sys_model = builtin("prototype", {"k": K, "gamma": 0.0})
        cfg = StepConfig(method="rk4-fixed", h=0.001, t_end=2.0)
        trajs = integrate_batch(sys_model,
                                np.array([[1.0, 2.0], [0.1, 0.0]]), cfg)
        blown, tame = trajs
        assert blown.events.blowup_kind is not None
        assert blown.t[-1] < 2.0
        assert np.all(np.isfinite(blown.states))
        assert tame.events.blowup_kind is None
        assert tame.t[-1] == pytest.approx(2.0)
