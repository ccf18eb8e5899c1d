import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmchange.cli import ingest_csv, write_csv
from ssmchange.cpfilter import ParticleSet, filtered_posterior, predict_and_resample
from ssmchange.model import ActivityPanel
from ssmchange.segment import SegmentEvaluator

from oracles import small_bound, small_panel

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 5),
    st.integers(1, 3),
    st.data(),
)
def test_csv_round_trip(tmp_path_factory, N, T, P, data):
    vals = np.array(data.draw(st.lists(finite, min_size=N * T * P, max_size=N * T * P))).reshape(N, T, P)
    miss = np.array(data.draw(st.lists(st.booleans(), min_size=N * T * P, max_size=N * T * P))).reshape(N, T, P)
    miss[:, -1, 0] = False  # keep every activity at full length
    vals[miss] = np.nan
    panel = ActivityPanel.from_array(vals)
    path = tmp_path_factory.mktemp("rt") / "p.csv"
    write_csv(panel, path)
    back = ingest_csv(path)
    np.testing.assert_array_equal(back.observed, panel.observed)
    assert back.values[back.observed].tobytes() == panel.values[panel.observed].tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 7), st.integers(1, 40), st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_particle_posterior_is_proper(N, B, seed, lam):
    rng = np.random.default_rng(seed)
    bound = small_bound(lam=lam)
    panel = small_panel(rng, N, 4)
    ev = SegmentEvaluator(bound, panel)
    ps = ParticleSet.initial(B)
    for n in range(2, N + 1):
        ps = predict_and_resample(ps, rng_seed=rng, evaluator=ev, lam=lam)
        assert all(1 <= d <= n for d in ps.unique)
        post = filtered_posterior(ps, evaluator=ev)
        assert abs(sum(post.values()) - 1.0) < 1e-12
        assert all(p >= 0 for p in post.values())
