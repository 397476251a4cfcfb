import dataclasses

import numpy as np
import pytest

from fdehbo import (
    CountingOracle,
    DivergenceError,
    InvalidArgumentError,
    IterationRecord,
    ScheduleParams,
    UnsupportedCapabilityError,
    init_state,
    run,
    schedule_at,
    theory_schedule,
    tuned_schedule,
)
from fdehbo.oracle import FirstOrderOnly
from fdehbo.optimizers import baseline_fo_step, check_radius, delta_bound, fdehbo_step, fmbo_step
from fdehbo.problems import QuadraticBilevel, QuadraticBilevelSpec, make_quadratic

CALLS_PER_SNAPSHOT = 7  # grad_g_y x3, grad_g_x x2, grad_f_y, grad_f_x


# -- schedule -----------------------------------------------------------------


def test_schedule_examples():
    assert schedule_at(ScheduleParams(w=8), 0).alpha == 0.5
    assert schedule_at(ScheduleParams(w=8, c_beta=2), 0).beta == 1.0
    assert schedule_at(ScheduleParams(w=1, c_eta_f=10), 0).eta_f == 1.0


def test_schedule_shape():
    p = ScheduleParams(w=3, c_beta=2, c_lambda=0.5, c_eta_f=0.1, c_eta_g=0.2, c_eta_R=0.3)
    s = schedule_at(p, 5)
    a = 8 ** (-1 / 3)
    assert s.alpha == pytest.approx(a, rel=1e-15)
    assert (s.beta, s.lam) == (2 * s.alpha, 0.5 * s.alpha)
    assert s.eta_f == pytest.approx(0.1 * a * a) and s.eta_R == pytest.approx(0.3 * a * a)
    alphas = [schedule_at(p, t).alpha for t in range(200)]
    assert all(x > y for x, y in zip(alphas, alphas[1:]))
    assert all(0 < x <= 1 for x in alphas)


def test_schedule_eta_forced_to_one_at_start():
    s = schedule_at(ScheduleParams(w=1000, c_eta_f=1e-3, c_eta_g=1e-3, c_eta_R=1e-3), 0)
    assert (s.eta_f, s.eta_g, s.eta_R) == (1.0, 1.0, 1.0)


@pytest.mark.parametrize("kwargs", [{"w": 0.5}, {"c_beta": 0}, {"r_v": -1}, {"delta_eps": np.nan}, {"T": 0},
                                    {"T": 2.5}])
def test_schedule_params_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        ScheduleParams(**kwargs)


def test_schedule_rejects_negative_t():
    with pytest.raises(InvalidArgumentError):
        schedule_at(ScheduleParams(), -1)


def test_check_radius(quad, caplog):
    r = quad.constants.default_radius()
    assert check_radius(ScheduleParams(r_v=r), quad.constants)
    assert not check_radius(ScheduleParams(r_v=r / 2), quad.constants)
    assert "below" in caplog.text


def test_delta_bound_formula(logistic):
    p = ScheduleParams(w=8, c_eta_f=2, c_eta_R=3, r_v=2, T=9)
    want = 2 / (8 * logistic.constants.L_gxy * 4 * 16 ** (2 / 3))
    assert delta_bound(logistic.constants, p) == pytest.approx(want, rel=1e-12)


def test_theory_schedule_satisfies_lower_bounds(logistic):
    p = theory_schedule(logistic.constants, T=100)
    c = logistic.constants
    assert p.r_v == pytest.approx(c.C_fy / c.mu_g)
    assert p.delta_eps <= delta_bound(c, p)
    assert p.w >= 1 and p.c_eta_f > 0 and p.c_eta_R > 0


def test_tuned_schedule_uses_inverse_smoothness(quad):
    p = tuned_schedule(quad.constants, T=50, c_eta=1.5)
    s0 = schedule_at(p, 0)
    assert s0.beta == pytest.approx(1 / quad.constants.L_g)
    assert p.c_eta_g == 1.5 and p.delta_eps == 1e-4


# -- steps ----------------------------------------------------------------------


def _params(quad, T=20, **kw):
    return dataclasses.replace(tuned_schedule(quad.constants, T=T), **kw)


def test_fdehbo_is_hessian_free_with_exact_call_count(noisy_quad):
    T = 25
    c = CountingOracle(noisy_quad)
    run("FdeHBO", c, _params(noisy_quad, T), seed=0, diagnostics=False)
    assert c.second_order_calls == 0
    assert c.first_order_calls == CALLS_PER_SNAPSHOT * (2 * T - 1)
    assert c.calls["grad_g_y"] == 3 * (2 * T - 1) and c.calls["grad_g_x"] == 2 * (2 * T - 1)
    assert c.calls["grad_f_y"] == c.calls["grad_f_x"] == 2 * T - 1


def test_fdehbo_runs_on_first_order_only_problem(noisy_quad):
    res = run("FdeHBO", FirstOrderOnly(noisy_quad), _params(noisy_quad, 5), seed=0)
    assert len(res.records) == 5


def test_fmbo_uses_one_product_of_each_kind_per_snapshot(noisy_quad):
    T = 10
    c = CountingOracle(noisy_quad)
    run("FMBO", c, _params(noisy_quad, T), seed=0, diagnostics=False)
    assert c.calls["hess_g_yy_vec"] == c.calls["jac_g_xy_vec"] == 2 * T - 1


def test_fmbo_requires_second_order(noisy_quad):
    with pytest.raises(UnsupportedCapabilityError):
        run("FMBO", FirstOrderOnly(noisy_quad), _params(noisy_quad, 3))
    state = init_state(noisy_quad, _params(noisy_quad))
    with pytest.raises(UnsupportedCapabilityError):
        fmbo_step(state, FirstOrderOnly(noisy_quad), _params(noisy_quad), 0)


def test_same_key_at_both_snapshots(noisy_quad):
    c = CountingOracle(noisy_quad, record=True)
    run("FdeHBO", c, _params(noisy_quad, 3), seed=4, diagnostics=False)
    stochastic = [(m, k) for m, k in c.log if k is not None]
    for t in (1, 2):
        keys = {(m, k) for m, k in stochastic if k.index == t}
        # each (method, key) pair is queried at the current and the previous snapshot
        for m, k in keys:
            assert sum(1 for mm, kk in stochastic if (mm, kk) == (m, k)) % 2 == 0
        assert all(k.seed == 4 for _, k in keys)


def test_fixed_point_is_invariant():
    # decoupled quadratic, zero noise, at x* with y*(x*), v*
    spec = QuadraticBilevelSpec(Q=np.diag([2.0, 3.0]), P=np.zeros((2, 2)), c=[1.0, -1.0], A=np.eye(2),
                                a=[0.5, 0.25], b=[0.0, 0.0])
    prob = QuadraticBilevel(spec)
    x = np.array([0.5, 0.25])
    y = prob.y_star(x)
    gt = prob.ground_truth(prob_point := __import__("fdehbo").Point(x, y))
    assert np.allclose(gt.grad_phi, 0)
    params = ScheduleParams(w=8, c_beta=0.2, c_lambda=0.2, r_v=10.0, T=30)
    for alg in ("FdeHBO", "FMBO", "BaselineFO"):
        state = init_state(prob, params, x0=x, y0=y, v0=gt.v_star)
        res = run(alg, prob, params, state=state, diagnostics=False)
        cur = res.state.current
        assert np.allclose(cur.x, x, atol=1e-12) and np.allclose(cur.y, y, atol=1e-12)
        if alg != "BaselineFO":
            assert np.allclose(cur.v, gt.v_star, atol=1e-12)


def test_first_ls_step_from_zero(noisy_quad):
    params = _params(noisy_quad, 1)
    state = init_state(noisy_quad, params, seed=2)
    new, _ = fdehbo_step(state, noisy_quad, params, seed=2)
    from fdehbo import Point, SampleKey, Stream, project_ball

    pt = state.current.point
    lam0 = schedule_at(params, 0).lam
    want = project_ball(lam0 * noisy_quad.grad_f_y(pt, SampleKey(Stream.LsPsi, 2, 0)), params.r_v)
    assert np.allclose(new.current.v, want, atol=1e-14)


def test_projection_invariant_along_run(noisy_quad):
    params = _params(noisy_quad, 200, r_v=0.05)
    state = init_state(noisy_quad, params)
    for _ in range(200):
        state, _ = fdehbo_step(state, noisy_quad, params, 0)
        assert np.linalg.norm(state.current.v) <= 0.05


def test_baseline_ignores_implicit_term():
    # f depends on y only, so grad_x f = 0 while grad Phi != 0
    spec = QuadraticBilevelSpec(Q=np.eye(2), P=np.eye(2), c=np.zeros(2), A=np.zeros((2, 2)), a=np.zeros(2),
                                b=np.ones(2))
    prob = QuadraticBilevel(spec)
    params = ScheduleParams(w=64, c_beta=2.0, c_lambda=2.0, r_v=100.0, T=300)
    x0 = np.array([3.0, -2.0])
    base = run("BaselineFO", prob, params, state=init_state(prob, params, x0=x0))
    assert np.array_equal(base.state.current.x, x0)
    fd = run("FdeHBO", prob, params, state=init_state(prob, params, x0=x0))
    assert fd.final["grad_phi_norm_sq"] < 1e-2 * fd.records[0].grad_phi_norm_sq


def test_baseline_is_sgd_when_levels_decouple():
    spec = QuadraticBilevelSpec(Q=np.eye(1), P=np.zeros((1, 2)), c=[0.0], A=np.diag([1.0, 2.0]), a=[1.0, 1.0],
                                b=[0.0], noise_sigma=0.3)
    prob = QuadraticBilevel(spec)
    params = ScheduleParams(w=8, T=5)
    state = init_state(prob, params, x0=np.zeros(2), y0=np.zeros(1))
    x = np.zeros(2)
    from fdehbo import Point, SampleKey, Stream

    for t in range(5):
        state, _ = baseline_fo_step(state, prob, params, seed=0)
        x = x - schedule_at(params, t).alpha * prob.grad_f_x(Point(x, np.zeros(1)), SampleKey(Stream.UpperXi, 0, t))
        assert np.array_equal(state.current.x, x)


# -- driver ---------------------------------------------------------------------


def test_run_t1_returns_one_record(quad):
    res = run("FdeHBO", quad, _params(quad, 1))
    assert len(res.records) == 1 and res.records[0].t == 0


def test_run_is_deterministic(noisy_quad):
    a = run("FdeHBO", noisy_quad, _params(noisy_quad, 50), seed=7, diag_every=5)
    b = run("FdeHBO", noisy_quad, _params(noisy_quad, 50), seed=7, diag_every=5)
    assert [r.as_row() for r in a.records] == [r.as_row() for r in b.records]
    c = run("FdeHBO", noisy_quad, _params(noisy_quad, 50), seed=8, diag_every=5)
    assert [r.as_row() for r in a.records] != [r.as_row() for r in c.records]


def test_records_reproduce_schedule(noisy_quad):
    params = _params(noisy_quad, 40)
    res = run("FMBO", noisy_quad, params, diag_every=7)
    assert len(res.records) == 40
    for rec in res.records:
        s = schedule_at(params, rec.t)
        assert (rec.alpha, rec.beta, rec.lam, rec.eta_f, rec.eta_g, rec.eta_R) == \
            (s.alpha, s.beta, s.lam, s.eta_f, s.eta_g, s.eta_R)
        assert (rec.grad_phi_norm_sq is not None) == (rec.t % 7 == 0 or rec.t == 39)


def test_running_average_column(noisy_quad):
    res = run("FdeHBO", noisy_quad, _params(noisy_quad, 30), diag_every=10)
    vals = [r.grad_phi_norm_sq for r in res.records if r.grad_phi_norm_sq is not None]
    avgs = [r.grad_phi_avg for r in res.records if r.grad_phi_avg is not None]
    assert avgs[-1] == pytest.approx(np.mean(vals))


def test_divergence_keeps_partial_records():
    prob = make_quadratic(3, 3, 1.0, 1.0, noise=0.0, seed=0)
    params = ScheduleParams(w=1, c_beta=1e6, c_lambda=1.0, r_v=1.0, T=2000)
    with pytest.raises(DivergenceError) as info:
        run("FdeHBO", prob, params, diagnostics=False)
    assert info.value.iteration > 0
    assert len(info.value.records) == info.value.iteration


def test_run_argument_validation(quad):
    with pytest.raises(InvalidArgumentError):
        run("FdeHBO", quad, _params(quad, 2), diag_every=0)
    with pytest.raises(InvalidArgumentError):
        run("FdeHBO", quad, _params(quad, 2), batch=0)


def test_record_columns():
    cols = IterationRecord.columns()
    assert cols[:4] == ["t", "alpha", "beta", "lambda"] and "wall_time" not in cols
    assert "wall_time" in IterationRecord.columns(with_time=True)


def test_minibatch_reduces_variance(noisy_quad):
    p1 = run("FdeHBO", noisy_quad, _params(noisy_quad, 2), seed=0, batch=1)
    p8 = run("FdeHBO", noisy_quad, _params(noisy_quad, 2), seed=0, batch=8)
    assert p8.records[0].err_g < p1.records[0].err_g
