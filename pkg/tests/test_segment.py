import numpy as np
import pytest

from ssmchange import kalman
from ssmchange.segment import (
    PotentialCache,
    SegmentEvaluator,
    StateDimensionError,
    assemble,
    log_potential,
    segment_logmarginal,
    stack_observations,
)

from oracles import segment_loglik, segmentations, small_bound, small_panel, spans


@pytest.fixture
def bound():
    return small_bound(P=2, init_var=5.0)


def test_assembled_dimensions(bound):
    seg = assemble(bound, 3)
    assert seg.inst.state_dim == bound.M + 3 * bound.K
    assert seg.inst.obs_dim == 3 * bound.P
    with pytest.raises(StateDimensionError):
        assemble(bound, 10, max_state_dim=bound.M + 9 * bound.K)
    with pytest.raises(ValueError):
        assemble(bound, 0)


@pytest.mark.parametrize("seed", range(4))
def test_segment_logmarginal_matches_per_activity_oracle(bound, seed):
    rng = np.random.default_rng(seed)
    panel = small_panel(rng, N=3, T=5, P=2, missing=0.15)
    for j, k in [(1, 1), (1, 3), (2, 3)]:
        want = segment_loglik(bound, panel.values[j - 1 : k], panel.observed[j - 1 : k])
        assert segment_logmarginal(bound, panel, j, k) == pytest.approx(want, abs=1e-8)


def test_single_activity_segment_is_plain_filter(bound):
    panel = small_panel(np.random.default_rng(0), N=2, T=6, P=2)
    inst = assemble(bound, 1).inst
    assert segment_logmarginal(bound, panel, 2, 2) == pytest.approx(kalman.filter(inst, panel.values[1]).loglik)


def test_exchangeable_within_segment(bound):
    rng = np.random.default_rng(1)
    panel = small_panel(rng, N=3, T=6, P=2)
    from ssmchange.model import ActivityPanel

    perm = ActivityPanel(panel.values[[2, 0, 1]], panel.observed[[2, 0, 1]])
    assert segment_logmarginal(bound, panel, 1, 3) == pytest.approx(segment_logmarginal(bound, perm, 1, 3), abs=1e-8)


def test_upto_t_is_prefix_likelihood(bound):
    panel = small_panel(np.random.default_rng(2), N=2, T=7, P=2)
    full = kalman.filter(assemble(bound, 2).inst, *stack_observations(panel, 1, 2))
    assert segment_logmarginal(bound, panel, 1, 2, upto_t=4) == pytest.approx(full.cumulative_loglik[3])


@pytest.mark.parametrize("seed", range(5))
def test_potentials_telescope_along_segmentations(seed):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(3, 7))
    bound = small_bound(P=1)
    panel = small_panel(rng, N=N, T=5, P=1, missing=0.1)
    ev = SegmentEvaluator(bound, panel)
    for cps in list(segmentations(N))[:: max(1, 2 ** (N - 1) // 8)]:
        direct = sum(segment_logmarginal(bound, panel, j, k) for j, k in spans(cps, N))
        delays, d = [], 0
        for n in range(1, N + 1):
            d = 1 if n in cps else d + 1
            delays.append(d)
        pots = sum(ev.log_potential(n, d) for n, d in zip(range(1, N + 1), delays))
        assert pots == pytest.approx(direct, abs=1e-10)


def test_potential_at_delay_one_is_activity_marginal(bound):
    panel = small_panel(np.random.default_rng(3), N=3, T=5, P=2)
    assert log_potential(bound, panel, 3, 1) == pytest.approx(segment_logmarginal(bound, panel, 3, 3))
    with pytest.raises(ValueError):
        log_potential(bound, panel, 2, 3)


def test_evaluator_batches_and_caches(bound):
    panel = small_panel(np.random.default_rng(4), N=5, T=6, P=2)
    cache = PotentialCache()
    ev = SegmentEvaluator(bound, panel, cache)
    res = ev.evaluate([(1, 2), (2, 3), (3, 4), (4, 5)])
    assert ev.filter_passes == 1  # same length and mask: one covariance pass
    for (j, k), r in res.items():
        assert r.loglik == pytest.approx(segment_logmarginal(bound, panel, j, k), abs=1e-9)
    ev.evaluate([(1, 2)])
    assert ev.filter_passes == 1
    assert (1, 2) in cache
    cache.evict(min_first=3)
    assert (1, 2) not in cache and (3, 4) in cache
    empty = ev.evaluate([(3, 2)])[(3, 2)]
    assert empty.loglik == 0.0


def test_segment_statistics_match_smoother(bound):
    rng = np.random.default_rng(5)
    panel = small_panel(rng, N=2, T=6, P=2)
    ev = SegmentEvaluator(bound, panel)
    st = ev.evaluate([(1, 2)], stats=True)[(1, 2)].stats
    inst = assemble(bound, 2).inst
    Y, mask = stack_observations(panel, 1, 2)
    sm = kalman.smooth(inst, Y, mask)
    M, K = bound.M, bound.K
    # segment block moments, transitions t -> t + 1
    Ex = sm.mean[:, :M]
    V = sm.cov[:, :M, :M]
    L = sm.lag_one_cov[:, :M, :M]
    A00 = sum(np.outer(Ex[t], Ex[t]) + V[t] for t in range(5))
    A11 = sum(np.outer(Ex[t + 1], Ex[t + 1]) + V[t + 1] for t in range(5))
    A10 = sum(np.outer(Ex[t + 1], Ex[t]) + L[t] for t in range(5))
    np.testing.assert_allclose(st.A00, A00, atol=1e-8)
    np.testing.assert_allclose(st.A11, A11, atol=1e-8)
    np.testing.assert_allclose(st.A10, A10, atol=1e-8)
    assert st.n_obs == 12
    # measurement residual second moment
    R = np.zeros((2, 2))
    for t in range(6):
        for a in range(2):
            rows = slice(2 * a, 2 * a + 2)
            Zt = inst.Z[rows]
            e = Y[t, rows] - Zt @ sm.mean[t]
            R += np.outer(e, e) + Zt @ sm.cov[t] @ Zt.T
    np.testing.assert_allclose(st.R, R, atol=1e-8)
    assert st.n_seg == 5 and st.n_act == 10
    assert K == 2
