import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from glister_dp.cli import main
from glister_dp.config import ExperimentConfig, config_from_dict, load_config
from glister_dp.data import load_binary
from glister_dp.errors import ConfigurationError
from glister_dp.experiment import emit_convergence_data, emit_fig2_data, run_experiment

SMALL = {
    "dataset": {"kind": "synthetic", "n_total": 1000, "seed": 3},
    "train": {"epochs": 3, "lot_size": 64, "selection_interval": 2, "delta": 1e-5},
    "strategies": ["glister-dp", "random-dp"],
    "k_grid": [0.5],
    "eps_grid": [3.0],
    "seeds": [0, 1, 2],
    "workers": 1,
}


def _write(tmp_path, cfg, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = load_config(_write(tmp_path, SMALL))
        cfg.dump(tmp_path / "again.yaml")
        again = load_config(tmp_path / "again.yaml")
        assert again == cfg
        assert again.to_yaml() == cfg.to_yaml()

    @pytest.mark.parametrize("where", ["top", "dataset", "train"])
    def test_unknown_keys_rejected(self, tmp_path, where):
        raw = json.loads(json.dumps(SMALL))
        target = raw if where == "top" else raw[where]
        target["clip_nrom"] = 1.0
        with pytest.raises(ConfigurationError, match="clip_nrom"):
            load_config(_write(tmp_path, raw))

    def test_missing_path(self):
        with pytest.raises(ConfigurationError):
            config_from_dict({"dataset": {"kind": "idx-digits", "path": "/nonexistent"}})

    def test_empty_grid(self):
        with pytest.raises(ConfigurationError):
            config_from_dict({"seeds": []})

    def test_unknown_strategy(self):
        with pytest.raises(ConfigurationError):
            config_from_dict({"strategies": ["glister"]})

    def test_default_delta_uses_train_size(self):
        cfg = ExperimentConfig()
        tc = cfg.train_config("random-dp", 3.0, 0.1, 0, n_train=3000)
        assert tc.budget.delta == pytest.approx(1 / 3000)
        assert tc.budget.alloc_ratio == 1.0


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("exp")
    cfg = config_from_dict(SMALL)
    status = run_experiment(cfg, tmp / "a")
    return tmp, cfg, status


class TestRun:
    def test_cross_product(self, experiment):
        tmp, _, status = experiment
        assert status == 0
        assert len(list((tmp / "a" / "runs").glob("*/metrics.csv"))) == 6
        summary = _rows(tmp / "a" / "summary.csv")
        assert len(summary) == 6
        assert list(summary[0]) == ["strategy", "eps", "k", "seed", "final_accuracy", "total_seconds", "status"]
        assert len(_rows(tmp / "a" / "aggregate.csv")) == 2

    def test_rerun_identical(self, experiment):
        tmp, cfg, _ = experiment
        run_experiment(cfg, tmp / "b")
        strip = lambda rows: [{k: v for k, v in r.items() if k != "total_seconds"} for r in rows]  # noqa: E731
        assert strip(_rows(tmp / "a" / "summary.csv")) == strip(_rows(tmp / "b" / "summary.csv"))

    def test_parallel_matches_serial(self, experiment):
        tmp, cfg, _ = experiment
        run_experiment(cfg, tmp / "c", workers=2)
        a = [r["final_accuracy"] for r in _rows(tmp / "a" / "summary.csv")]
        c = [r["final_accuracy"] for r in _rows(tmp / "c" / "summary.csv")]
        assert a == c

    def test_run_files(self, experiment):
        tmp, _, _ = experiment
        run_dir = tmp / "a" / "runs" / "glister-dp_eps3_k0.5_seed0"
        for name in ("metrics.csv", "summary.json", "ledger.jsonl", "subset.csv"):
            assert (run_dir / name).exists()
        assert not list(run_dir.glob("*.tmp"))
        recs = [json.loads(line) for line in (run_dir / "ledger.jsonl").read_text().splitlines()]
        assert {r["phase"] for r in recs} == {"train", "selection"}

    def test_table_grid_shape(self, tmp_path):
        raw = dict(SMALL, k_grid=[0.3, 0.4, 0.5, 0.6, 0.7], eps_grid=[3.0, 8.0], seeds=[0],
                   train=dict(SMALL["train"], epochs=1))
        assert run_experiment(config_from_dict(raw), tmp_path) == 0
        assert len(_rows(tmp_path / "aggregate.csv")) == 20

    def test_failure_sets_exit_status(self, tmp_path):
        raw = dict(SMALL, k_grid=[0.05], seeds=[0])  # subset smaller than one lot
        assert run_experiment(config_from_dict(raw), tmp_path) != 0
        rows = _rows(tmp_path / "summary.csv")
        assert all(r["status"].startswith("failed") for r in rows)
        assert list(tmp_path.glob("runs/*/error.txt"))

    def test_full_dp_shared_across_k(self, tmp_path):
        raw = dict(SMALL, strategies=["full-dp"], k_grid=[0.3, 0.5], seeds=[0],
                   train=dict(SMALL["train"], epochs=1))
        assert run_experiment(config_from_dict(raw), tmp_path) == 0
        rows = _rows(tmp_path / "summary.csv")
        assert [r["k"] for r in rows] == ["0.3", "0.5"]
        assert rows[0]["final_accuracy"] == rows[1]["final_accuracy"]


class TestEmitters:
    def test_convergence(self, experiment):
        tmp, _, _ = experiment
        out = emit_convergence_data(tmp / "a")
        rows = _rows(out)
        assert len(rows) == 6 * 3
        assert list(rows[0]) == ["strategy", "eps", "k", "seed", "epoch", "wall_clock_s", "test_accuracy"]
        for seed in "012":
            for strat in ("glister-dp", "random-dp"):
                t = [float(r["wall_clock_s"]) for r in rows if r["seed"] == seed and r["strategy"] == strat]
                assert all(b > a for a, b in zip(t, t[1:]))

    def test_fig2_requires_diagnostics(self, experiment):
        tmp, _, _ = experiment
        with pytest.raises(FileNotFoundError, match="retain_diagnostics"):
            emit_fig2_data(tmp / "a" / "runs" / "glister-dp_eps3_k0.5_seed0")

    def test_fig2_rows(self, tmp_path):
        raw = dict(SMALL, strategies=["glister-dp"], seeds=[0],
                   train=dict(SMALL["train"], retain_diagnostics=True))
        run_experiment(config_from_dict(raw), tmp_path)
        run_dir = tmp_path / "runs" / "glister-dp_eps3_k0.5_seed0"
        csv_path, tv_path = emit_fig2_data(run_dir)
        rows = _rows(csv_path)
        tv = json.loads(tv_path.read_text())
        assert len(tv) == 2
        for rnd in tv:
            mine = [r for r in rows if int(r["round"]) == rnd["round"]]
            assert len(mine) == rnd["pool_size"]
            true_p = [float(r["true_probability"]) for r in mine]
            assert true_p == sorted(true_p, reverse=True)
            assert sum(float(r["em_probability"]) for r in mine) == pytest.approx(1.0)


class TestMain:
    def test_run_verb_and_env(self, tmp_path, monkeypatch):
        raw = dict(SMALL, seeds=[0], output_dir="exp", train=dict(SMALL["train"], epochs=1))
        monkeypatch.setenv("GLISTER_DP_OUTPUT", str(tmp_path / "root"))
        assert main(["run", str(_write(tmp_path, raw)), "--seed-offset", "5"]) == 0
        rows = _rows(tmp_path / "root" / "exp" / "summary.csv")
        assert {r["seed"] for r in rows} == {"5"}

    def test_bad_config_exit_code(self, tmp_path, capsys):
        path = _write(tmp_path, {"bogus": 1})
        assert main(["run", str(path)]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_sweep_alloc(self, tmp_path):
        raw = dict(SMALL, seeds=[0], r_grid=[0.3, 0.7], train=dict(SMALL["train"], epochs=2))
        assert main(["sweep-alloc", str(_write(tmp_path, raw)), "--output", str(tmp_path / "s")]) == 0
        rows = _rows(tmp_path / "s" / "alloc.csv")
        assert [float(r["r"]) for r in rows] == [0.3, 0.7]
        assert len(_rows(tmp_path / "s" / "alloc_aggregate.csv")) == 2

    def test_gen_data_round_trip(self, tmp_path):
        spec = {"dataset": {"kind": "synthetic", "n_total": 500, "seed": 1}, "csv": True}
        path = _write(tmp_path, spec, "spec.yaml")
        assert main(["gen-data", str(path), "--output", str(tmp_path / "d")]) == 0
        train = load_binary(tmp_path / "d" / "train.bin")
        assert len(train) == 300
        cached = {"dataset": {"kind": "cached-binary", **{r: str(tmp_path / "d" / f"{r}.bin")
                                                          for r in ("train", "val", "test")}}}
        bundle = config_from_dict(cached).dataset.load()
        np.testing.assert_array_equal(bundle.train.labels, train.labels)
        assert (tmp_path / "d" / "test.csv").exists()

    def test_fig2_missing_is_error(self, tmp_path, capsys):
        assert main(["fig2", str(tmp_path)]) == 2
        assert "retain_diagnostics" in capsys.readouterr().err


class TestShippedConfigs:
    CONFIGS = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.yaml"))

    @pytest.mark.parametrize("path", [p for p in CONFIGS if p.name != "gen_synthetic.yaml"], ids=lambda p: p.name)
    def test_parses(self, path, tmp_path):
        raw = yaml.safe_load(path.read_text())
        if raw["dataset"]["kind"] == "idx-digits":
            raw["dataset"]["path"] = str(tmp_path)
        cfg = config_from_dict(raw)
        assert config_from_dict(cfg.to_dict()) == cfg

    def test_table_grid_has_twenty_cells(self, tmp_path):
        raw = yaml.safe_load((self.CONFIGS[0].parent / "mnist_grid.yaml").read_text())
        raw["dataset"]["path"] = str(tmp_path)
        cfg = config_from_dict(raw)
        assert len(cfg.strategies) * len(cfg.k_grid) * len(cfg.eps_grid) == 20
