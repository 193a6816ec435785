"""Tests for the gauss-cf entrypoint: exit codes, density grids, fit -> generate."""

import json

import numpy as np
import polars as pl
import pytest

from cf_utils.errors import (
    ArtifactError,
    ConfigError,
    FactorizationError,
    InsufficientDataError,
    NoCounterfactualError,
    SchemaError,
    UnreachableError,
)
from cf_utils.gaussian import rng_stream
from run_utils.cli import DEMO_A, main, exit_code


def _write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _dataset(tmp_path, n=60):
    rng = rng_stream(2)
    y = np.arange(n) % 2
    age = rng.uniform(20, 60, n).round(1)
    x2 = rng.standard_normal(n) + np.where(y == 1, 2.0, -2.0)
    pl.DataFrame({"age": age, "x2": x2, "y": y}).write_csv(tmp_path / "data.csv")
    _write_json(tmp_path / "schema.json", {"label": "y", "features": [
        {"name": "age", "kind": "continuous", "immutable": True},
        {"name": "x2", "kind": "continuous"},
    ]})
    return _write_json(tmp_path / "run.json", {
        "seed": 1, "dataset": "data.csv", "schema": "schema.json",
        "hidden": [4], "train": {"steps": 150, "lr": 0.05},
    })


class TestExitCodes:
    def test_mapping(self):
        assert exit_code(ArtifactError("x")) == 4
        assert exit_code(ConfigError("x")) == 3
        assert exit_code(SchemaError("x")) == 5
        assert exit_code(NoCounterfactualError("x", 1.0)) == 7
        assert exit_code(UnreachableError("x")) == 7
        assert exit_code(FactorizationError("x")) == 6

    def test_missing_config(self, tmp_path):
        assert main(["bench", "--config", str(tmp_path / "nope.json")]) == 4

    def test_invalid_config(self, tmp_path):
        cfg = _write_json(tmp_path / "bad.json", {"seed": 1, "synthetic": {}, "workers": 0})
        assert main(["bench", "--config", cfg]) == 3

    def test_unknown_config_key(self, tmp_path):
        cfg = _write_json(tmp_path / "bad.json", {"seed": 1, "synthetic": {}, "wokers": 2})
        assert main(["bench", "--config", cfg]) == 3

    def test_bench_needs_config(self):
        assert main(["bench"]) == 3

    def test_generate_needs_model(self, tmp_path):
        assert main(["generate", "--config", _dataset(tmp_path), "--reference-index", "0"]) == 4

    def test_unknown_method_is_a_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["generate", "--method", "dice"])
        assert err.value.code == 2


class TestDensityGrid:
    def test_pure_prior_peaks_at_the_mean(self, tmp_path):
        out = str(tmp_path)
        assert main(["density-grid", "--panel", "pgm2", "--alpha", "0", "--precision", "0",
                     "--grid-res", "51", "--out", out]) == 0
        df = pl.read_csv(tmp_path / "density.csv")
        assert df.height == 51 * 51
        xs = np.unique(df["x"].to_numpy())
        ys = np.unique(df["y"].to_numpy())
        best = df.row(int(np.argmax(df["log_density"].to_numpy())), named=True)
        assert abs(best["x"]) <= xs[1] - xs[0]
        assert abs(best["y"]) <= ys[1] - ys[0]

    def test_pgm1_ridge_follows_the_target_line(self, tmp_path):
        assert main(["density-grid", "--panel", "pgm1", "--precision", "1", "--gamma", "1",
                     "--grid-res", "101", "--out", str(tmp_path)]) == 0
        df = pl.read_csv(tmp_path / "density.csv")
        lp = df["log_density"].to_numpy()
        top = np.argsort(lp)[-max(1, lp.size // 100):]
        pts = np.column_stack([df["x"].to_numpy(), df["y"].to_numpy()])[top]
        _, _, vt = np.linalg.svd(pts - pts.mean(axis=0))
        along = np.array([3.0, 2.0]) / np.sqrt(13.0)
        assert abs(vt[0] @ along) > 0.99
        assert abs(vt[0] @ np.asarray(DEMO_A[0])) / np.sqrt(13.0) < 0.15

    def test_bad_bounds(self, tmp_path):
        assert main(["density-grid", "--bounds", "1,0,0,1", "--out", str(tmp_path)]) == 3


class TestFitGenerate:
    def test_immutable_column_never_changes(self, tmp_path, capsys):
        cfg = _dataset(tmp_path)
        fit_out = tmp_path / "fit"
        assert main(["fit", "--config", cfg, "--out", str(fit_out)]) == 0
        for name in ("model.json", "prior.json", "schema.json", "latent.csv", "train_trace.csv"):
            assert (fit_out / name).exists()
        assert "[fit] done" in capsys.readouterr().out

        gen_out = tmp_path / "gen"
        assert main(["generate", "--config", cfg, "--model", str(fit_out / "model.json"),
                     "--prior", str(fit_out / "prior.json"), "--reference-index", "0",
                     "--method", "ours", "--param", "steps=300", "--out", str(gen_out)]) == 0
        changes = pl.read_csv(gen_out / "changes.csv")
        age = changes.filter(pl.col("feature") == "age")
        assert age.height == 1
        assert float(age["delta"][0]) == 0.0
        cfs = pl.read_csv(gen_out / "counterfactuals.csv")
        assert cfs.columns == ["index", "target_prob", "valid", "age", "x2"]

    def test_reference_width_checked(self, tmp_path):
        cfg = _dataset(tmp_path)
        fit_out = tmp_path / "fit"
        assert main(["fit", "--config", cfg, "--out", str(fit_out)]) == 0
        assert main(["generate", "--config", cfg, "--model", str(fit_out / "model.json"),
                     "--reference", "30.0", "--out", str(tmp_path / "g")]) == 5

    def test_bench_on_synthetic_data(self, tmp_path, capsys):
        cfg = _write_json(tmp_path / "bench.json", {
            "seed": 4, "synthetic": {"n": 80}, "hidden": [4], "train": {"steps": 100, "lr": 0.05},
            "references": 3, "timing": "off",
            "methods": [{"name": "wachter", "params": {"steps": 50}}, {"name": "face", "params": {"face_k": 5}}],
        })
        assert main(["bench", "--config", cfg, "--method", "wachter", "--out", str(tmp_path / "b")]) == 0
        report = pl.read_csv(tmp_path / "b" / "report.csv")
        assert set(report["method"].to_list()) == {"wachter"}
        assert "wachter:" in capsys.readouterr().out


class TestDataErrors:
    def test_bench_records_face_failures(self, tmp_path):
        cfg = _write_json(tmp_path / "bench.json", {
            "seed": 4, "synthetic": {"n": 12}, "hidden": [4], "train": {"steps": 50},
            "references": 2, "timing": "off", "methods": [{"name": "face"}],
        })
        assert main(["bench", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        records = pl.read_csv(tmp_path / "b" / "records.csv")
        assert records.height == 2
        assert records["ok"].to_list() == [0, 0]
        assert all(e.startswith("InsufficientDataError") for e in records["error"].to_list())

    def test_generate_face_with_too_few_rows(self, tmp_path, capsys):
        cfg = _dataset(tmp_path)
        fit_out = tmp_path / "fit"
        assert main(["fit", "--config", cfg, "--out", str(fit_out)]) == 0
        code = main(["generate", "--config", cfg, "--model", str(fit_out / "model.json"),
                     "--reference-index", "0", "--method", "face", "--param", "face_k=80",
                     "--out", str(tmp_path / "g")])
        assert code == 5
        assert "needs at least 81 training rows" in capsys.readouterr().err

    def test_negative_gamma_is_a_config_error(self, tmp_path):
        cfg = _write_json(tmp_path / "bad.json", {
            "seed": 1, "synthetic": {}, "methods": [{"name": "wachter", "params": {"gamma": -1}}],
        })
        assert main(["bench", "--config", cfg]) == 3

    def test_insufficient_data_maps_to_dataset_code(self):
        assert exit_code(InsufficientDataError("x", 5, 2)) == 5
