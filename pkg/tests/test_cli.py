import csv
import json
import subprocess
import sys

import pytest

from dyngroup.cli import EXIT_ERROR, EXIT_ITERATION_CAP, EXIT_OK, RunManifest, main
from dyngroup.estimator import FitReport
from dyngroup.generator import ObservationSet

SIM = {"K": 4, "N": 5, "I": 2, "Q": [2, 2], "T": 8, "n": 60}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def simulated(tmp_path):
    cfg = write_json(tmp_path / "sim.json", SIM)
    out = tmp_path / "data"
    assert main(["simulate", "--config", cfg, "--seed", "3", "--out", str(out)]) == EXIT_OK
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestSimulate:
    def test_outputs(self, simulated):
        obs = ObservationSet.load(simulated)
        assert obs.counts.shape == (8, 2, 4, 5)
        for name in ("truth.json", "states.csv", "manifest.json"):
            assert (simulated / name).exists()

    def test_same_seed_same_files(self, tmp_path, simulated):
        cfg = write_json(tmp_path / "sim2.json", SIM)
        again = tmp_path / "again"
        main(["simulate", "--config", cfg, "--seed", "3", "--out", str(again)])
        for name in ("meta.json", "counts_t0.csv", "counts_t7.csv", "states.csv", "truth.json"):
            assert (again / name).read_bytes() == (simulated / name).read_bytes()

    def test_missing_fraction_keeps_complete(self, tmp_path):
        cfg = write_json(tmp_path / "sim.json", SIM)
        out = tmp_path / "m"
        main(["simulate", "--config", cfg, "--out", str(out), "--missing-fraction", "0.2"])
        masked, full = ObservationSet.load(out), ObservationSet.load(out / "complete")
        assert masked.mask is not None and masked.counts.sum() < full.counts.sum()

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "bad.json", dict(SIM, horizon=3))
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x")]) == EXIT_ERROR
        assert "horizon" in capsys.readouterr().err

    def test_missing_size_rule(self, tmp_path):
        doc = {k: v for k, v in SIM.items() if k != "n"}
        assert main(["simulate", "--config", write_json(tmp_path / "c.json", doc), "--out", str(tmp_path / "x")]) == EXIT_ERROR


class TestFit:
    def test_fit_converges(self, tmp_path, simulated):
        out = tmp_path / "fit"
        code = main(["fit", str(simulated), "--orders", "2,2", "--out", str(out)])
        report = FitReport.load(out)
        assert code == (EXIT_OK if report.converged else EXIT_ITERATION_CAP)
        assert (out / "mse_trace.csv").exists() and (out / "manifest.json").exists()

    def test_iteration_cap_exit_code(self, tmp_path, simulated):
        cfg = write_json(tmp_path / "fit.json", {"max_iters": 1})
        code = main(["fit", str(simulated), "--orders", "2,2", "--config", cfg, "--out", str(tmp_path / "f")])
        assert code == EXIT_ITERATION_CAP

    def test_init_params_dimension_check(self, tmp_path, simulated):
        truth = json.loads((simulated / "truth.json").read_text())
        truth["C"] = truth["C"][:1]
        truth.pop("dims")
        path = write_json(tmp_path / "init.json", truth)
        code = main(["fit", str(simulated), "--init-params", path, "--out", str(tmp_path / "f")])
        assert code == EXIT_ERROR

    def test_start_from_truth(self, tmp_path, simulated):
        out = tmp_path / "f"
        main(["fit", str(simulated), "--init-params", str(simulated / "truth.json"),
              "--config", write_json(tmp_path / "c.json", {"max_iters": 2}), "--out", str(out)])
        assert len(FitReport.load(out).mse_trace) == 3

    def test_unknown_fit_key(self, tmp_path, simulated):
        cfg = write_json(tmp_path / "fit.json", {"learning_rate": 1})
        assert main(["fit", str(simulated), "--config", cfg, "--out", str(tmp_path / "f")]) == EXIT_ERROR

    def test_missing_dataset(self, tmp_path):
        assert main(["fit", str(tmp_path / "nowhere"), "--out", str(tmp_path / "f")]) == EXIT_ERROR

    def test_bad_orders_rejected_by_parser(self, tmp_path, simulated):
        with pytest.raises(SystemExit):
            main(["fit", str(simulated), "--orders", "two", "--out", str(tmp_path / "f")])


class TestSelectOrder:
    def test_writes_curve(self, tmp_path, simulated, capsys):
        out = tmp_path / "o"
        assert main(["select-order", str(simulated), "--j-max", "3", "--q-max", "3", "--out", str(out)]) == EXIT_OK
        rows = read_csv(out / "f_k.csv")
        groups = [r for r in rows if r["level"] == "groups"]
        assert groups[0]["k"] == "1" and float(groups[0]["f"]) == 1.0
        orders = json.loads((out / "orders.json").read_text())
        assert capsys.readouterr().out.strip() == f"J={orders['J']} Q={','.join(map(str, orders['Q']))}"


class TestEvaluate:
    def test_metrics_with_truth(self, tmp_path, simulated):
        fit_dir = tmp_path / "f"
        main(["fit", str(simulated), "--orders", "2,2", "--out", str(fit_dir),
              "--config", write_json(tmp_path / "c.json", {"max_iters": 3})])
        out = tmp_path / "e"
        assert main(["evaluate", "--report", str(fit_dir), "--dataset", str(simulated), "--out", str(out)]) == EXIT_OK
        row = read_csv(out / "metrics.csv")[0]
        assert {"mse", "x_mae", "c_mae", "state_accuracy"} <= set(row)
        assert 0.0 <= float(row["state_accuracy"]) <= 1.0

    def test_small_sweep(self, tmp_path):
        cfg = write_json(tmp_path / "exp.json", {"K": 4, "N": 4, "I": 2, "J": 2, "Q": [2, 2], "T": 6,
                                                  "max_iters": 2, "max_sources": 2})
        out = tmp_path / "s"
        code = main(["evaluate", "--sweep", "n", "--values", "20,80", "--runs", "2", "--workers", "1",
                     "--config", cfg, "--out", str(out)])
        assert code == EXIT_OK
        summary = read_csv(out / "sweep_summary.csv")
        assert [r["value"] for r in summary] == ["20", "80"]
        assert len(read_csv(out / "sweep_runs.csv")) == 4

    def test_needs_inputs(self, tmp_path):
        assert main(["evaluate", "--out", str(tmp_path / "e")]) == EXIT_ERROR


class TestIngest:
    def test_events(self, tmp_path):
        events = tmp_path / "ev.csv"
        events.write_text("source,time,x,y,count\n0,0,1,2,5\n")
        (tmp_path / "ev.meta.json").write_text(json.dumps({"dims": {"T": 1, "I": 1, "K": 3, "N": 3}}))
        out = tmp_path / "o"
        assert main(["ingest", "--events", str(events), "--out", str(out)]) == EXIT_OK
        assert ObservationSet.load(out).Z[0, 0, 1, 2] == 1.0

    def test_bad_row(self, tmp_path, capsys):
        events = tmp_path / "ev.csv"
        events.write_text("source,time,x,y,count\n0,0,9,2,5\n")
        (tmp_path / "ev.meta.json").write_text(json.dumps({"dims": {"T": 1, "I": 1, "K": 3, "N": 3}}))
        assert main(["ingest", "--events", str(events), "--out", str(tmp_path / "o")]) == EXIT_ERROR
        assert "row 2" in capsys.readouterr().err

    def test_coauthor(self, tmp_path):
        path = tmp_path / "co.csv"
        path.write_text("source,time,author_a,author_b,weight\nA,0,a,b,2\nA,1,b,c,2\n")
        out = tmp_path / "o"
        code = main(["ingest", "--coauthor", str(path), "--min-author-count", "0", "--min-source-count", "0",
                     "--out", str(out)])
        assert code == EXIT_OK
        assert json.loads((out / "index.json").read_text())["authors"] == ["a", "b", "c"]


class TestReplay:
    def test_bit_identical(self, tmp_path, simulated):
        fit_dir = tmp_path / "f"
        cfg = tmp_path / "c.json"
        write_json(cfg, {"max_iters": 3})
        main(["fit", str(simulated), "--orders", "2,2", "--config", str(cfg), "--out", str(fit_dir)])
        cfg.write_text(json.dumps({"max_iters": 50}))  # later edits must not leak into the replay
        again = tmp_path / "g"
        main(["replay", str(fit_dir / "manifest.json"), "--out", str(again)])
        for name in ("report.json", "mse_trace.csv", "states.csv"):
            assert (again / name).read_bytes() == (fit_dir / name).read_bytes()
        manifest = RunManifest.load(fit_dir / "manifest.json")
        assert manifest.config["max_iters"] == 3 and manifest.command == "fit"


def test_console_script(tmp_path):
    res = subprocess.run([sys.executable, "-m", "dyngroup.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("dyngroup ")
    res = subprocess.run([sys.executable, "-m", "dyngroup.cli", "fit", str(tmp_path / "none"), "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode != 0 and "error" in res.stderr
    assert res.stdout == ""
