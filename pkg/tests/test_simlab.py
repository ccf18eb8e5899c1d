import numpy as np
import pytest

from ssmchange.model import SegmentIndex
from ssmchange.simlab import (
    DetectionReport,
    EngineSettings,
    ReplicationResult,
    SimSpec,
    generate,
    report_from_replications,
    score,
    sweep,
)


def test_score_examples():
    truth = SegmentIndex(6, (1, 3))
    assert score({3, 5}, truth) == (1.0, 0.75)
    assert score({3}, truth) == (1.0, 1.0)
    assert score(set(range(2, 7)), truth) == (1.0, 0.0)
    # activity 1 is never classified
    assert score({1, 3}, truth) == (1.0, 1.0)
    with pytest.raises(ValueError):
        score({7}, truth)
    sens, spec = score(set(), SegmentIndex(3, (1,)))
    assert np.isnan(sens) and spec == 1.0


def test_generate_shapes_and_truth():
    spec = SimSpec(N=30, T=10, S=5, seed=4)
    sc = generate(spec)
    assert sc.panel.values.shape == (30, 10, 2)
    assert len(sc.truth.changepoints) == 6  # activity 1 plus S
    assert all(2 <= c <= 30 for c in sc.truth.changepoints[1:])
    again = generate(spec)
    np.testing.assert_array_equal(sc.panel.values, again.panel.values)
    assert generate(spec, seed=5).panel.values[0, 0, 0] != sc.panel.values[0, 0, 0]


def test_noiseless_limit_is_loaded_segment_state():
    spec = SimSpec(N=8, T=6, S=2, sigma_eps2=0.0, sigma_d2=0.0)
    sc = generate(spec)
    for s, (j, k) in enumerate(sc.truth.segments):
        want = sc.segment_states[s][:, [0, 2]]
        for n in range(j, k + 1):
            np.testing.assert_allclose(sc.panel.values[n - 1], want, atol=1e-12)


def test_measurement_noise_moment():
    spec = SimSpec(N=420, T=120, S=10, sigma_eps2=1.0, seed=1)
    sc = generate(spec)
    resid = np.empty_like(sc.panel.values)
    for s, (j, k) in enumerate(sc.truth.segments):
        resid[j - 1 : k] = sc.panel.values[j - 1 : k] - sc.segment_states[s][None][:, :, [0, 2]] - sc.activity_states[j - 1 : k]
    assert resid.size >= 1e5
    assert resid.var() == pytest.approx(1.0, rel=0.05)


def test_invalid_specs():
    with pytest.raises(ValueError):
        SimSpec(N=5, S=5)
    with pytest.raises(ValueError):
        SimSpec(rho=1.0)
    with pytest.raises(ValueError):
        SimSpec(sigma_eps2=-1)


def _fake_result(seed, probs, cps, N):
    return ReplicationResult(seed, SegmentIndex(N, cps), np.asarray(probs), {}, None)


def test_report_single_replication_echoes_score():
    truth_cps = (1, 3)
    probs = [1.0, 0.2, 0.9, 0.1, 0.6, 0.0]
    rep = report_from_replications([_fake_result(0, probs, truth_cps, 6)], [0.5])
    assert isinstance(rep, DetectionReport)
    np.testing.assert_allclose(rep.rates["between"][0.5][0], score({3, 5}, SegmentIndex(6, truth_cps)))
    row = rep.summary()[0]
    assert row["sensitivity"]["median"] == 1.0 and row["specificity"]["median"] == 0.75


def test_threshold_monotonicity_per_replication():
    rng = np.random.default_rng(0)
    results = [_fake_result(s, rng.random(20), (1, 5, 12), 20) for s in range(4)]
    rep = report_from_replications(results, [0.3, 0.5, 0.7, 0.9])
    sens = np.stack([rep.rates["between"][d][:, 0] for d in rep.deltas])
    spec = np.stack([rep.rates["between"][d][:, 1] for d in rep.deltas])
    assert np.all(np.diff(sens, axis=0) <= 0)
    assert np.all(np.diff(spec, axis=0) >= 0)


def test_sweep_small_and_deterministic():
    spec = SimSpec(N=12, T=8, S=2)
    settings = EngineSettings(n_particles=20, burn_in=3)
    a = sweep(spec, settings, deltas=(0.5,), replications=2, cut_points=(4, 8))
    b = sweep(spec, settings, deltas=(0.5,), replications=2, cut_points=(4, 8))
    assert set(a.rates) == {"between", "within@4", "within@8"}
    for mode in a.rates:
        np.testing.assert_array_equal(a.rates[mode][0.5], b.rates[mode][0.5])
    # with no lookahead, within at t = T already sees the whole activity
    np.testing.assert_array_equal(a.rates["within@8"][0.5], a.rates["between"][0.5])
    with pytest.raises(ValueError):
        sweep(spec, settings, deltas=(1.2,), replications=1)
