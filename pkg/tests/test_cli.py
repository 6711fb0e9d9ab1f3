import csv
import json

import numpy as np
import pytest

from tightgp import cli


@pytest.fixture
def results(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RESULTS_ENV, str(tmp_path / "results"))
    return tmp_path


def records(tmp_path):
    path = tmp_path / "results" / cli.RESULTS_FILE
    return [json.loads(line) for line in path.read_text().splitlines()]


def regression_csv(tmp_path, n=60, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3, 3, (n, 2))
    y = np.sin(X[:, 0]) + 0.5 * X[:, 1] + 0.1 * rng.standard_normal(n)
    path = tmp_path / "reg.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "b", "y"])
        w.writerows(np.column_stack([X, y]).tolist())
    return path


class TestExitCodes:
    def test_unknown_command_is_usage_error(self, results, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["frobnicate"])
        assert info.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self, results):
        with pytest.raises(SystemExit) as info:
            cli.main(["gradcheck", "--objective", "f4", "--bogus"])
        assert info.value.code == 2

    def test_runtime_failure_writes_error_record(self, results):
        code = cli.main(["fit", "--objective", "sgpr", "--dataset", str(results / "missing.csv"),
                         "--iterations", "2"])
        assert code == 1
        rec = records(results)[-1]
        assert rec["status"] == "error" and rec["failed"] and "missing.csv" in rec["error"]

    def test_gradcheck_ok(self, results):
        assert cli.main(["gradcheck", "--objective", "t-sgpr"]) == 0
        rec = records(results)[-1]
        assert rec["metrics"]["max_relative_error"] <= 1e-4


class TestCompareBounds:
    def test_ordering_holds(self, results, capsys):
        path = regression_csv(results)
        assert cli.main(["compare-bounds", "--dataset", str(path), "-M", "6"]) == 0
        m = records(results)[-1]["metrics"]
        assert m["f1"] <= m["f5"] + 1e-7 <= m["f4"] + 2e-7 <= m["f8"] + 3e-7 <= m["exact"] + 4e-7
        assert m["f1"] <= m["f9"] + 1e-7 <= m["f4"] + 2e-7
        out = capsys.readouterr().out
        assert out.index("f1") < out.index("exact")

    def test_violation_exits_nonzero(self, results, monkeypatch):
        path = regression_csv(results)
        real = cli.collapsed_bound

        def broken(kind, *args, **kwargs):
            value = real(kind, *args, **kwargs)
            return value.total + 100.0 if kind.value == "f1" else value

        monkeypatch.setattr(cli, "collapsed_bound", broken)
        assert cli.main(["compare-bounds", "--dataset", str(path), "-M", "4"]) == 1
        assert records(results)[-1]["status"] == "ordering-violated"


class TestFitPredict:
    def test_predict_modes_share_means(self, results):
        path = regression_csv(results)
        ck = results / "ck.json"
        assert cli.main(["fit", "--objective", "t-sgpr", "--dataset", str(path), "-M", "5",
                         "--iterations", "50", "--checkpoint", str(ck)]) == 0
        inputs = results / "in.csv"
        inputs.write_text("a,b\n0.1,0.2\n-1,2\n2.5,-0.3\n")
        outs = {}
        for mode in ("full", "simplified"):
            dest = results / f"{mode}.csv"
            assert cli.main(["predict", "--checkpoint", str(ck), "--input", str(inputs),
                             "--variance-mode", mode, "--output", str(dest)]) == 0
            outs[mode] = np.loadtxt(dest, delimiter=",", skiprows=1)
        assert np.array_equal(outs["full"][:, 0], outs["simplified"][:, 0])
        assert np.all(outs["full"][:, 1] <= outs["simplified"][:, 1] + 1e-12)

    def test_predict_rejects_changed_data(self, results):
        path = regression_csv(results)
        ck = results / "ck.json"
        cli.main(["fit", "--objective", "sgpr", "--dataset", str(path), "-M", "4",
                  "--iterations", "5", "--checkpoint", str(ck)])
        regression_csv(results, seed=1)
        inputs = results / "in.csv"
        inputs.write_text("a,b\n0,0\n")
        assert cli.main(["predict", "--checkpoint", str(ck), "--input", str(inputs)]) == 1

    def test_records_are_self_describing(self, results):
        path = regression_csv(results)
        cli.main(["fit", "--objective", "svgp", "--dataset", str(path), "-M", "4", "--iterations", "5"])
        cli.main(["gradcheck", "--objective", "f1"])
        recs = records(results)
        assert [r["command"] for r in recs] == ["fit", "gradcheck"]
        for r in recs:
            assert {"command", "config", "dataset_hash", "seed", "metrics", "failed"} <= set(r)
            assert all(v == "nan" or np.isfinite(v) for v in r["metrics"].values()
                       if not isinstance(v, (bool, str)))
        assert {"elbo", "rmse", "log_likelihood", "wall_time"} <= set(recs[0]["metrics"])

    def test_replay_from_record(self, results):
        path = regression_csv(results)
        cli.main(["fit", "--objective", "t-svgp", "--dataset", str(path), "-M", "4",
                  "--iterations", "20", "--batch", "10", "--seed", "3"])
        first = records(results)[-1]
        c = first["config"]
        argv = ["fit", "--objective", c["objective"], "--dataset", c["dataset"],
                "-M", str(c["num_inducing"]), "--iterations", str(c["iterations"]),
                "--batch", str(c["batch"]), "--lr", str(c["lr"]), "--optimizer", c["optimizer"],
                "--likelihood", c["likelihood"], "--family", c["family"],
                "--test-fraction", str(c["test_fraction"]), "--seed", str(first["seed"])]
        assert cli.main(argv) == 0
        second = records(results)[-1]
        for key in ("elbo", "rmse", "log_likelihood", "noise_variance"):
            assert first["metrics"][key] == second["metrics"][key]

    def test_uncollapsed_matches_collapsed(self, results):
        path = regression_csv(results, n=40)
        common = ["--dataset", str(path), "-M", "5", "--optimizer", "lbfgs", "--iterations", "3000",
                  "--test-fraction", "0.1"]
        assert cli.main(["fit", "--objective", "t-sgpr", *common]) == 0
        assert cli.main(["fit", "--objective", "t-svgp", "--batch", "0", *common]) == 0
        a, b = records(results)[-2:]
        assert abs(a["metrics"]["elbo"] - b["metrics"]["elbo"]) <= 0.5


class TestReproduce:
    def test_snelson_record(self, results):
        assert cli.main(["reproduce", "snelson", "--iterations", "2000"]) == 0
        m = records(results)[-1]["metrics"]
        assert m["t-sgpr_objective"] >= m["sgpr_objective"]
        series = json.loads((results / "results" / "snelson_series_seed0.json").read_text())
        assert {"sgpr objective", "t-sgpr predictive mean"} <= {s["label"] for s in series}

    def test_table1_skips_missing_data(self, results, monkeypatch):
        monkeypatch.delenv("TIGHTGP_DATA_DIR", raising=False)
        assert cli.main(["reproduce", "table1", "--iterations", "5"]) == 0
        m = records(results)[-1]["metrics"]
        assert m["wine_skipped"] and m["solar_skipped"]


def test_run_record_flags_non_finite():
    rec = cli.RunRecord("x", {}, metrics={"a": float("nan"), "b": 1.0})
    out = rec.clean()
    assert out["metrics"] == {"a": "nan", "b": 1.0} and out["failed"]
