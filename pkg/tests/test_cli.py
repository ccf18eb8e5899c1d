import json

import numpy as np
import pytest

from ssmchange import SimSpec, generate
from ssmchange.cli import ConfigError, RunConfig, ingest_csv, load_config, main, write_csv
from ssmchange.model import ActivityPanel


def _records(capsys):
    out = capsys.readouterr().out
    return [json.loads(line) for line in out.splitlines() if line.strip()]


def test_ingest_well_formed(tmp_path):
    f = tmp_path / "a.csv"
    f.write_text("activity,t,hr,speed\n" + "\n".join(f"{a},{t},{a * 10 + t},{t * 0.5}" for a in (7, 9) for t in (1, 2, 3)) + "\n")
    panel = ingest_csv(f)
    assert panel.values.shape == (2, 3, 2)
    assert panel.values[1, 2, 0] == 93.0
    assert panel.observed.all()


def test_ingest_missing_cell_and_padding(tmp_path):
    f = tmp_path / "a.csv"
    f.write_text("activity,t,hr,speed\n1,1,100,\n1,2,101,3.0\n2,1,90,2.5\n")
    panel = ingest_csv(f)
    assert panel.values.shape == (2, 2, 2)
    assert panel.observed[0, 0, 0] and not panel.observed[0, 0, 1]
    assert panel.values[0, 0, 0] == 100.0
    # activity 2 has no t = 2 row: padded as missing
    assert not panel.observed[1, 1].any()


@pytest.mark.parametrize(
    "body, needle",
    [
        ("1,1,1,2\n1,5,1,2\n1,5,3,4\n", ":4: duplicate"),
        ("1,1,abc,2\n", ":2: non-numeric"),
        ("1,1,1\n", ":2: expected 4 fields"),
        ("1,x,1,2\n", ":2: time index"),
    ],
)
def test_ingest_errors_name_the_line(tmp_path, body, needle):
    f = tmp_path / "bad.csv"
    f.write_text("activity,t,a,b\n" + body)
    with pytest.raises(ConfigError, match=needle):
        ingest_csv(f)


def test_ingest_bad_header(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("id,time,a\n1,1,1\n")
    with pytest.raises(ConfigError):
        ingest_csv(f)


def test_round_trip_is_bit_exact(tmp_path):
    sc = generate(SimSpec(N=4, T=7, S=1, seed=3))
    arr = sc.panel.to_array()
    arr[1, 3, 0] = np.nan
    arr[2, 0, :] = np.nan
    panel = ActivityPanel.from_array(arr)
    f = tmp_path / "p.csv"
    write_csv(panel, f)
    back = ingest_csv(f)
    np.testing.assert_array_equal(back.observed, panel.observed)
    assert np.array_equal(back.values, panel.values)
    assert back.values.tobytes() == panel.values.tobytes()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lam": 0.2, "n_particles": 17, "seed": 4}))
    rc = load_config(str(cfg), {"lam": 0.3, "seed": None})
    assert rc.lam == 0.3 and rc.n_particles == 17 and rc.seed == 4
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError):
        load_config(str(cfg), {})
    with pytest.raises(ConfigError):
        load_config(None, {"delta": 1.5})


def test_config_hash_ignores_paths():
    a = RunConfig(input="x.csv")
    b = RunConfig(input="y.csv")
    assert a.hash() == b.hash()
    assert a.hash() != RunConfig(lam=0.4).hash()


@pytest.fixture
def sim_csv(tmp_path, capsys):
    f = tmp_path / "sim.csv"
    assert main(["simulate", "--N", "8", "--T", "6", "--S", "2", "--seed", "1", "--data", str(f)]) == 0
    recs = _records(capsys)
    assert recs[0]["type"] == "scenario" and len(recs[0]["changepoints"]) == 3
    return f


def test_detect_emits_one_record_per_activity(sim_csv, capsys):
    assert main(["detect", "--input", str(sim_csv), "--particles", "20", "--burn-in", "2", "--seed", "5"]) == 0
    recs = _records(capsys)
    assert [r["n"] for r in recs] == list(range(1, 9))
    for r in recs:
        assert r["type"] == "activity" and r["seed"] == 5 and "config_hash" in r
        assert 0.0 <= r["p_changepoint"] <= 1.0
        assert r["alert"] == (r["p_changepoint"] > 0.5)


def test_fit_emits_passes_times_n_records(sim_csv, capsys):
    assert main(["fit", "--input", str(sim_csv), "--particles", "10", "--burn-in", "2", "--passes", "3"]) == 0
    recs = _records(capsys)
    assert len(recs) == 3 * 8
    assert {r["pass"] for r in recs} == {1, 2, 3}
    assert "sigma_eps2" in recs[-1]["theta"]["scalars"]


def test_monitor_emits_t_records(sim_csv, capsys):
    assert main(["monitor", "--input", str(sim_csv), "--activity", "5", "--particles", "10", "--burn-in", "2"]) == 0
    recs = _records(capsys)
    assert [r["t"] for r in recs] == list(range(1, 7))
    assert all(r["n"] == 5 for r in recs)
    assert main(["monitor", "--input", str(sim_csv), "--activity", "1"]) == 0
    assert _records(capsys)[0]["p_changepoint"] == 1.0


def test_evaluate_reports(capsys, tmp_path):
    out = tmp_path / "r.jsonl"
    args = ["evaluate", "--N", "10", "--T", "6", "--S", "2", "--replications", "2", "--particles", "10",
            "--burn-in", "2", "--deltas", "0.5", "0.9", "--output", str(out)]
    assert main(args) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    modes = {r["mode"] for r in recs}
    assert modes == {"between", "within@2", "within@4"}
    assert all(r["type"] == "report" for r in recs)


def test_errors_are_records_with_nonzero_exit(tmp_path, capsys):
    assert main(["detect", "--lam", "2"]) == 2
    rec = _records(capsys)[0]
    assert rec["type"] == "error" and "lam" in rec["message"]
    assert main(["detect"]) == 2
    assert _records(capsys)[0]["type"] == "error"
    bad = tmp_path / "bad.csv"
    bad.write_text("activity,t,a\n1,1,1\n1,1,2\n")
    assert main(["detect", "--input", str(bad)]) == 2
    assert "duplicate" in _records(capsys)[0]["message"]
    assert main(["monitor", "--input", str(bad).replace("bad", "missing")]) == 2
