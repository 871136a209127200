import csv
import json
import os

import numpy as np
import pytest

from ubvi.cli import (
    ExperimentConfig,
    build_target,
    main,
    read_trace_csv,
    run_experiment,
    summarize,
)

TINY = dict(
    n_components=2,
    trials=2,
    grad_samples=100,
    est_samples=500,
    opt_iters=200,
    init_trials=200,
    weight_opt_iters=50,
    weight_samples=100,
    diag_samples=500,
)


def tiny_config(tmp_path, **over):
    values = dict(TINY)
    values.update(over)
    return ExperimentConfig(out=str(tmp_path / "out"), **values)


def read_all(path):
    with open(path, "rb") as fh:
        return fh.read()


def strip_cpu_column(path):
    rows = [r for r in csv.reader(open(path)) if r]
    idx = rows[0].index("cpu_time_s")
    return [tuple(v for i, v in enumerate(r) if i != idx) for r in rows]


class TestRunExperiment:
    def test_gauss_mix_ubvi_outputs(self, tmp_path):
        cfg = tiny_config(tmp_path, target="gauss-mix", method="ubvi", seed=5)
        code = run_experiment(cfg)
        assert code == 0
        for t in range(2):
            assert os.path.exists(os.path.join(cfg.out, f"trace_ubvi_t{t:03d}.csv"))
            assert os.path.exists(os.path.join(cfg.out, f"mixture_ubvi_t{t:03d}.json"))
            assert os.path.exists(os.path.join(cfg.out, f"diag_ubvi_t{t:03d}.json"))
        assert os.path.exists(os.path.join(cfg.out, "summary.csv"))
        assert os.path.exists(os.path.join(cfg.out, "target_density.csv"))
        rows = read_trace_csv(os.path.join(cfg.out, "trace_ubvi_t000.csv"))
        assert [r["n"] for r in rows] == ["1", "2"]
        assert all(r["method"] == "ubvi" for r in rows)
        mixture = json.load(open(os.path.join(cfg.out, f"mixture_ubvi_t000.json")))
        assert mixture["kind"] == "sqrt" and len(mixture["components"]) == 2
        diag = json.load(open(os.path.join(cfg.out, "diag_ubvi_t000.json")))
        for key in ("hell_hat", "hell_tilde", "fwd_kl", "rev_kl", "tv", "w1",
                    "energy", "ess", "n_samples", "seed"):
            assert key in diag
        assert diag["tv"] is not None and diag["w1"] is not None

    def test_rerun_byte_identical_outside_timings(self, tmp_path):
        cfg1 = tiny_config(tmp_path / "a", target="gauss-mix", method="vi", seed=2)
        cfg2 = tiny_config(tmp_path / "b", target="gauss-mix", method="vi", seed=2)
        assert run_experiment(cfg1) == 0
        assert run_experiment(cfg2) == 0
        assert strip_cpu_column(
            os.path.join(cfg1.out, "trace_vi_t000.csv")
        ) == strip_cpu_column(os.path.join(cfg2.out, "trace_vi_t000.csv"))
        assert read_all(os.path.join(cfg1.out, "mixture_vi_t000.json")) == read_all(
            os.path.join(cfg2.out, "mixture_vi_t000.json")
        )
        assert read_all(os.path.join(cfg1.out, "diag_vi_t000.json")) == read_all(
            os.path.join(cfg2.out, "diag_vi_t000.json")
        )

    def test_jobs_parallel_same_results(self, tmp_path):
        cfg1 = tiny_config(tmp_path / "serial", target="gauss-mix", method="vi", seed=3)
        cfg2 = tiny_config(
            tmp_path / "parallel", target="gauss-mix", method="vi", seed=3, jobs=2
        )
        run_experiment(cfg1)
        run_experiment(cfg2)
        for t in range(2):
            assert read_all(
                os.path.join(cfg1.out, f"mixture_vi_t{t:03d}.json")
            ) == read_all(os.path.join(cfg2.out, f"mixture_vi_t{t:03d}.json"))

    def test_unknown_target_exits_one(self, tmp_path):
        code = main(
            ["run", "--target", "nonsense", "--method", "ubvi",
             "--out", str(tmp_path / "x")]
        )
        assert code == 1

    def test_bad_flag_exits_one(self):
        with pytest.raises(SystemExit) as err:
            main(["run", "--method", "warp-drive"])
        assert err.value.code == 1

    def test_logistic_writes_energy_column(self, tmp_path):
        cfg = tiny_config(
            tmp_path, target="logistic", method="vi", trials=1, seed=7
        )
        assert run_experiment(cfg) == 0
        rows = read_trace_csv(os.path.join(cfg.out, "trace_vi_t000.csv"))
        assert rows[0]["energy"] != ""
        assert rows[0]["fwd_kl"] == ""  # unnormalized posterior: no KL column
        diag = json.load(open(os.path.join(cfg.out, "diag_vi_t000.json")))
        assert diag["energy"] is not None and diag["fwd_kl"] is None

    def test_config_file_with_flag_override(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        base = dict(TINY)
        base.update({"target": "gauss-mix", "method": "vi", "trials": 1,
                     "out": str(tmp_path / "fromfile")})
        cfg_path.write_text(json.dumps(base))
        code = main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "o2")])
        assert code == 0
        assert os.path.exists(tmp_path / "o2" / "trace_vi_t000.csv")
        assert not os.path.exists(tmp_path / "fromfile")


class TestSummarize:
    def _write_trace(self, path, method, rows):
        header = ["method", "trial_seed", "n", "cpu_time_s", "hell_hat",
                  "hell_tilde", "fwd_kl", "rev_kl", "j1", "tau_bound",
                  "degenerate", "energy"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow(row)

    def test_single_trace_median_is_value(self, tmp_path):
        path = tmp_path / "t0.csv"
        self._write_trace(
            path, "ubvi",
            [["ubvi", 0, 1, "1.0", "0.5", "0.4", "0.3", "0.2", "0.1", "1.5", 0, ""]],
        )
        out = tmp_path / "summary.csv"
        summarize([str(path)], str(out))
        rows = read_trace_csv(str(out))
        assert rows[0]["hell_hat_median"] == "0.5"

    def test_quartiles_linear_interpolation(self, tmp_path):
        paths = []
        for i, val in enumerate((1.0, 2.0, 3.0)):
            p = tmp_path / f"t{i}.csv"
            self._write_trace(
                p, "ubvi",
                [["ubvi", i, 1, "1.0", repr(val), "", "", "", "", "", 0, ""]],
            )
            paths.append(str(p))
        out = tmp_path / "summary.csv"
        summarize(paths, str(out))
        row = read_trace_csv(str(out))[0]
        assert float(row["hell_hat_median"]) == 2.0
        assert float(row["hell_hat_q25"]) == 1.5
        assert float(row["hell_hat_q75"]) == 2.5
        first_line = open(out).readline()
        assert first_line.startswith("#") and "linear" in first_line

    def test_vi_energy_normalization_maps_to_one(self, tmp_path):
        paths = []
        for i, (method, energy) in enumerate(
            [("vi", 2.0), ("vi", 4.0), ("ubvi", 1.0)]
        ):
            p = tmp_path / f"t{i}.csv"
            self._write_trace(
                p, method,
                [[method, i, 1, "1.0", "", "", "", "", "", "", 0, repr(energy)]],
            )
            paths.append(str(p))
        out = tmp_path / "summary.csv"
        summarize(paths, str(out))
        rows = {r["method"]: r for r in read_trace_csv(str(out))}
        assert float(rows["vi"]["energy_norm_median"]) == 1.0
        assert float(rows["ubvi"]["energy_norm_median"]) == pytest.approx(1.0 / 3.0)

    def test_inconsistent_schema_rejected(self, tmp_path):
        p1 = tmp_path / "a.csv"
        self._write_trace(
            p1, "ubvi",
            [["ubvi", 0, 1, "1.0", "0.5", "0.4", "0.3", "0.2", "0.1", "1.5", 0, ""]],
        )
        p2 = tmp_path / "b.csv"
        with open(p2, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "n", "other"])
            writer.writerow(["x", 1, 2])
        with pytest.raises(ValueError):
            summarize([str(p1), str(p2)], str(tmp_path / "s.csv"))

    def test_no_traces_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            summarize([], str(tmp_path / "s.csv"))

    def test_cli_summarize_subcommand(self, tmp_path):
        p = tmp_path / "t0.csv"
        self._write_trace(
            p, "ubvi",
            [["ubvi", 0, 1, "1.0", "0.5", "0.4", "0.3", "0.2", "0.1", "1.5", 0, ""]],
        )
        out = tmp_path / "merged.csv"
        assert main(["summarize", str(p), "--out", str(out)]) == 0
        assert out.exists()


class TestBuildTarget:
    def test_known_targets(self):
        cfg = ExperimentConfig(target="cauchy")
        assert build_target(cfg, 0).name == "cauchy"
        assert build_target(ExperimentConfig(target="banana"), 0).name == "banana"
        assert build_target(ExperimentConfig(target="gauss-mix"), 0).name == "gauss_mix"
        assert build_target(ExperimentConfig(target="logistic"), 0).name == "logistic"

    def test_logistic_csv(self, tmp_path):
        rng = np.random.default_rng(0)
        data = np.column_stack([rng.standard_normal((30, 2)), rng.integers(0, 2, 30)])
        path = tmp_path / "d.csv"
        np.savetxt(path, data, delimiter=",", header="f1,f2,label", comments="")
        t = build_target(ExperimentConfig(target=f"logistic-csv:{path}"), 1)
        assert t.dim == 2

    def test_exit_code_two_on_aborted_trial(self, tmp_path, monkeypatch):
        import ubvi.cli as cli_mod
        from ubvi.boosting import RunTrace

        def fake_trial(cfg, trial):
            trace = RunTrace(method=cfg.method, seed=cfg.seed + trial, target="x")
            trace.aborted = True
            path = os.path.join(cfg.out, f"trace_{cfg.method}_t{trial:03d}.csv")
            os.makedirs(cfg.out, exist_ok=True)
            from ubvi.boosting import trace_to_csv

            trace_to_csv(trace, path)
            return trace

        monkeypatch.setattr(cli_mod, "run_trial", fake_trial)
        monkeypatch.setattr(cli_mod, "_trial_worker",
                            lambda args: (fake_trial(ExperimentConfig(**args[0]), args[1]).aborted, ""))
        cfg = tiny_config(tmp_path, target="gauss-mix", method="ubvi", trials=1)
        assert run_experiment(cfg) == 2
