import numpy as np
import pytest

from ssmchange.model import SIM_PSI0, SIM_SEGMENT_TRANSITION, Theta, bind_design, sim_spec, warmup_spec
from ssmchange.onlineem import (
    EngineConfig,
    GammaSchedule,
    OnlineEM,
    SingularStatisticsError,
    aggregate_Q,
    batch_em,
    event_stats,
    individual_contribution,
    maximize,
    segmentation_posterior,
    update_suffstats,
)
from ssmchange.segment import SegmentEvaluator
from ssmchange.suffstats import StatsLayout, SuffStats

from oracles import brute_force_marginal, small_bound, small_panel


def test_gamma_schedule():
    g = GammaSchedule(kappa=0.7, c=1.0)
    assert g(1) == pytest.approx(2 ** -0.7)
    assert g(10) < g(2)
    with pytest.raises(ValueError):
        GammaSchedule(kappa=0.4)


def _population_stats(spec, theta, n_obs=500.0, n_seg=300.0, n_act=600.0):
    """Statistics whose M-step image is exactly ``theta`` (simulation family)."""
    P, M, K = spec.P, spec.M, spec.K
    layout = StatsLayout(P, M, K)
    s = theta.scalars
    T_S = np.kron(np.eye(P), SIM_SEGMENT_TRANSITION)
    A00 = 7.0 * np.eye(M) + 0.5
    A10 = T_S @ A00
    A11 = T_S @ A00 @ T_S.T + n_seg * s["sigma_alpha2"] * np.kron(np.eye(P), SIM_PSI0)
    B00 = 3.0 * np.eye(K) * n_act / K
    B10 = s["rho"] * B00
    B11 = s["rho"] ** 2 * B00 + n_act * s["sigma_d2"] * np.eye(K)
    return SuffStats.zeros(layout).set(
        n_obs=n_obs,
        R=s["sigma_eps2"] * n_obs * np.eye(P),
        n_seg=n_seg,
        A00=A00,
        A10=A10,
        A11=A11,
        n_act=n_act,
        B00=B00,
        B10=B10,
        B11=B11,
    )


def test_sim_m_step_fixed_point():
    spec = sim_spec(P=2)
    theta = Theta.sim(1.3, 0.07, 4.0, 0.75)
    out = maximize(spec, _population_stats(spec, theta))
    np.testing.assert_allclose(out.params, theta.params, rtol=1e-10)


def test_m_step_rejects_empty_statistics():
    spec = sim_spec(P=1)
    with pytest.raises(SingularStatisticsError):
        maximize(spec, SuffStats.zeros(StatsLayout(1, 2, 1)))


def test_warmup_m_step_recovers_rho_and_delta():
    spec = warmup_spec()
    layout = StatsLayout(2, 3, 2)
    Delta = np.array([[2.0, 0.3], [0.3, 0.5]])
    rho = 0.6
    T_A = np.array([[1.0, 0.0], [0.0, rho]])
    B00 = np.array([[4.0, 1.0], [1.0, 3.0]]) * 100
    B10 = T_A @ B00
    B11 = T_A @ B00 @ T_A.T + 100 * Delta
    A00 = np.eye(3) * 50
    A10 = spec.T_S @ A00
    A11 = spec.T_S @ A00 @ spec.T_S.T + 80 * np.diag([1.0, 0.1, 0.2])
    Q = SuffStats.zeros(layout).set(
        n_obs=200.0, R=200 * np.diag([3.0, 0.2]), n_seg=80.0, A00=A00, A10=A10, A11=A11,
        n_act=100.0, B00=B00, B10=B10, B11=B11,
    )
    th = maximize(spec, Q)
    assert th.scalars["rho_sp"] == pytest.approx(rho, abs=1e-8)
    np.testing.assert_allclose(th.Delta, Delta, atol=1e-8)
    np.testing.assert_allclose(th.Sigma, np.diag([3.0, 0.2]), atol=1e-12)
    np.testing.assert_allclose(th.Psi, np.diag([1.0, 0.1, 0.2]), atol=1e-10)


def test_update_suffstats_recursion():
    layout = StatsLayout(1, 2, 1)
    a = SuffStats(layout, np.arange(layout.size, dtype=float))
    b = SuffStats(layout, np.ones(layout.size))
    incr = {1: b, 3: 2 * b}
    prev = {1: a, 2: 3 * a}
    kernels = {1: {1: 0.25, 2: 0.75}, 3: {2: 1.0}}
    out = update_suffstats(prev, incr, 0.2, kernels)
    assert out[1].allclose(0.8 * (0.25 * a + 0.75 * 3 * a) + 0.2 * b)
    assert out[3].allclose(0.8 * 3 * a + 0.2 * 2 * b)
    assert update_suffstats(None, incr, 0.2, kernels) == incr
    Q = aggregate_Q(out, {1: 0.5, 3: 0.5})
    assert Q.allclose(0.5 * out[1] + 0.5 * out[3])


def test_individual_contributions_telescope_to_segment_statistics():
    rng = np.random.default_rng(0)
    bound = small_bound(P=1)
    panel = small_panel(rng, 4, 5)
    ev = SegmentEvaluator(bound, panel)
    total = sum((individual_contribution(bound, panel, n, n, ev) for n in range(1, 5)), SuffStats.zeros(ev.layout))
    whole = ev.evaluate([(1, 4)], stats=True)[(1, 4)].stats
    assert total.set(n_cp=0.0, n_cont=0.0).allclose(whole, atol=1e-8)
    assert total.n_cp == 1.0 and total.n_cont == 3.0
    assert event_stats(ev.layout, 1).n_cp == 1.0


def test_segmentation_posterior_marginal_matches_brute_force():
    rng = np.random.default_rng(1)
    bound = small_bound(lam=0.3)
    panel = small_panel(rng, 5, 4, shift_at=(3,))
    post, _ = segmentation_posterior(bound, panel)
    assert post.log_marginal == pytest.approx(brute_force_marginal(bound, panel), abs=1e-8)
    # each activity is covered by exactly one segment
    for n in range(1, 6):
        cover = sum(p for (j, k), p in post.segment_probs.items() if j <= n <= k)
        assert cover == pytest.approx(1.0)


def test_batch_em_is_monotone():
    rng = np.random.default_rng(2)
    spec = sim_spec(P=1, lam=0.5, init_var=10.0)
    panel = small_panel(rng, 5, 12, shift_at=(3,))
    trace = batch_em(spec, Theta.sim(2.0, 0.2, 0.5, 0.2, P=1), panel, n_iter=5)
    ll = [v for _, v in trace]
    assert np.all(np.diff(ll) >= -1e-9)
    assert ll[-1] > ll[0]


def test_engine_freezes_parameters_during_burn_in():
    rng = np.random.default_rng(3)
    spec = sim_spec(P=1, init_var=10.0)
    theta0 = Theta.sim(1.0, 0.1, 1.0, 0.5, P=1)
    eng = OnlineEM(spec, theta0, T=6, config=EngineConfig(n_particles=20, burn_in=3), seed=0)
    panel = small_panel(rng, 6, 6)
    recs = list(eng.run(panel))
    assert all(r.theta is theta0 for r in recs[:3])
    assert recs[3].theta is not theta0
    for r in recs:
        assert sum(r.posterior.values()) == pytest.approx(1.0)
        assert r.within.shape == (6,)
        assert 0.0 <= r.within.min() and r.within.max() <= 1.0


def test_engine_with_learning_off_matches_exact_posterior():
    rng = np.random.default_rng(4)
    spec = sim_spec(P=1, lam=0.5, init_var=10.0)
    theta = Theta.sim(0.5, 0.05, 1.0, 0.6, P=1)
    panel = small_panel(rng, 5, 4, shift_at=(3,))
    from ssmchange.cpfilter import exact_enumeration

    ex = exact_enumeration(bind_design(spec, theta), panel)
    eng = OnlineEM(spec, theta, T=4, config=EngineConfig(n_particles=20000, learn=False), seed=1)
    for n, rec in enumerate(eng.run(panel), start=1):
        assert rec.p_changepoint == pytest.approx(ex.filtered[n - 1, 0], abs=0.03)


def test_engine_rejects_bad_shape():
    eng = OnlineEM(sim_spec(P=1), Theta.sim(1, 0.1, 1, 0.5, P=1), T=4)
    with pytest.raises(ValueError):
        eng.update(np.zeros((3, 1)))


def test_engine_within_endpoint_equals_between():
    rng = np.random.default_rng(5)
    spec = sim_spec(P=1, init_var=10.0)
    eng = OnlineEM(spec, Theta.sim(0.5, 0.05, 1.0, 0.6, P=1), T=5, config=EngineConfig(n_particles=50, learn=False), seed=0)
    for rec in eng.run(small_panel(rng, 5, 5, shift_at=(4,))):
        # with no lookahead the last time point still sees every past observation
        assert rec.within[-1] == pytest.approx(rec.p_changepoint, abs=1e-10)
