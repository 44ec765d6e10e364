from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from sdme.cli import EXIT_ERROR, EXIT_OK, EXIT_UNCONVERGED, main

TINY = ["--chains", "2", "--iter", "300", "--warmup", "150", "--thin", "1"]


def _rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _digest(directory: Path) -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["simulate", "--seed", "4", "--grid-k", "5", "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def fit_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = main(["fit", str(data_dir), "--model", "sdme", "--seed", "1", "--out", str(out), *TINY])
    assert code in (EXIT_OK, EXIT_UNCONVERGED)
    return out


class TestSimulate:
    def test_defaults(self, tmp_path):
        assert main(["simulate", "--seed", "0", "--out", str(tmp_path)]) == EXIT_OK
        sites = _rows(tmp_path / "sites.csv")
        assert len(sites) == 225
        counts = [sum(r["partition"] == p for r in sites) for p in ("training", "testing", "unsampled")]
        assert counts == [67, 113, 45]
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["seed"] == 0 and man["config"]["phi"] == 30
        assert man["partition_counts"] == {"training": 67, "testing": 113, "unsampled": 45}
        assert len(_rows(tmp_path / "edges.csv")) == 420

    def test_tiny_grid(self, tmp_path):
        assert main(["simulate", "--seed", "0", "--grid-k", "2", "--out", str(tmp_path)]) == EXIT_OK
        assert len(_rows(tmp_path / "sites.csv")) == 4

    def test_byte_identical_reruns(self, tmp_path):
        for d in ("a", "b"):
            assert main(["simulate", "--seed", "9", "--grid-k", "6", "--out", str(tmp_path / d)]) == EXIT_OK
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")

    def test_config_file_is_defaulted_and_echoed(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"grid_k": 3, "n_subjects": 8, "min_classifiers": 4, "max_classifiers": 8}))
        assert main(["simulate", "--seed", "2", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
        man = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert man["config"]["n_subjects"] == 8 and man["config"]["points_per_image"] == 15

    def test_missing_seed_is_usage_error(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path)]) == EXIT_ERROR

    def test_unknown_config_field(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"gridk": 3}')
        assert main(["simulate", "--seed", "1", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_ERROR


class TestFit:
    def test_outputs_are_complete(self, data_dir, fit_dir):
        names = {r["parameter"] for r in _rows(fit_dir / "summary.csv")}
        assert {"b0", "b1", "phi", "tau_u"} <= names
        n_subjects = json.loads((data_dir / "manifest.json").read_text())["config"]["n_subjects"]
        assert sum(n.startswith("se[") for n in names) == n_subjects
        assert sum(n.startswith("sp[") for n in names) == n_subjects
        n_hidden = sum(r["partition"] != "training" for r in _rows(data_dir / "sites.csv"))
        assert sum(n.startswith("y[") for n in names) == n_hidden
        assert len(_rows(fit_dir / "latent_posterior.csv")) == 25
        dg = json.loads((fit_dir / "diagnostics.json").read_text())
        assert "converged" in dg and "rhat" in dg["parameters"]["b1"]

    def test_weighted_reports_accuracy(self, data_dir, tmp_path):
        code = main(["fit", str(data_dir), "--model", "weighted", "--out", str(tmp_path), "--chains", "1", "--iter", "100", "--warmup", "50"])
        assert code in (EXIT_OK, EXIT_UNCONVERGED)
        names = {r["parameter"] for r in _rows(tmp_path / "summary.csv")}
        assert "acc[1]" in names and "se[1]" not in names

    def test_unconverged_exit_code_still_writes(self, data_dir, tmp_path):
        code = main(["fit", str(data_dir), "--out", str(tmp_path), "--chains", "2", "--iter", "12", "--warmup", "4", "--thin", "1"])
        assert code == EXIT_UNCONVERGED
        assert (tmp_path / "draws.csv").exists() and (tmp_path / "summary.csv").exists()

    def test_bad_sampler_settings(self, data_dir, tmp_path):
        assert main(["fit", str(data_dir), "--out", str(tmp_path), "--iter", "10", "--warmup", "10"]) == EXIT_ERROR

    def test_missing_data_dir(self, tmp_path):
        assert main(["fit", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_ERROR

    def test_malformed_input(self, data_dir, tmp_path):
        broken = tmp_path / "d"
        broken.mkdir()
        for name in ("classifications.csv", "edges.csv"):
            (broken / name).write_bytes((data_dir / name).read_bytes())
        (broken / "sites.csv").write_text("site_id,lon\n1,0\n")
        assert main(["fit", str(broken), "--out", str(tmp_path / "o")]) == EXIT_ERROR


class TestPredict:
    def test_report_against_truth(self, data_dir, fit_dir, tmp_path):
        assert main(["predict", str(fit_dir), "--data-dir", str(data_dir), "--out", str(tmp_path)]) == EXIT_OK
        n_uns = sum(r["partition"] == "unsampled" for r in _rows(data_dir / "sites.csv"))
        assert len(_rows(tmp_path / "prediction.csv")) == n_uns
        rep = json.loads((tmp_path / "prediction_report.json").read_text())
        assert rep["n_unsampled"] == n_uns
        assert 0 <= rep["coverage"] <= 1 and 0 <= rep["quintile_matches_unsampled"] <= n_uns


class TestDiagnose:
    def test_trace_and_density(self, fit_dir, tmp_path):
        assert main(["diagnose", str(fit_dir / "draws.csv"), "--out", str(tmp_path)]) == EXIT_OK
        header = (fit_dir / "draws.csv").read_text().splitlines()[0].split(",")[2:]
        trace = _rows(tmp_path / "trace.csv")
        assert len(trace) == len(header) * 2 * 150
        dg = json.loads((tmp_path / "diagnostics.json").read_text())
        assert set(dg["parameters"]) == set(header)
        dens = _rows(tmp_path / "density.csv")
        b1 = [(float(r["x"]), float(r["density"])) for r in dens if r["parameter"] == "b1"]
        x, d = map(np.array, zip(*b1))
        assert np.trapezoid(d, x) == pytest.approx(1.0, abs=0.01)

    def test_malformed_draws(self, tmp_path):
        p = tmp_path / "draws.csv"
        p.write_text("chain,iter,a\n0,0,x\n")
        assert main(["diagnose", str(p), "--out", str(tmp_path / "o")]) == EXIT_ERROR


class TestCompare:
    def test_two_models_per_replicate(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"simulation": {"grid_k": 3}}))
        out = tmp_path / "cmp"
        code = main(["compare", "-n", "2", "--seed", "5", "--config", str(cfg), "--out", str(out), "--chains", "1", "--iter", "60", "--warmup", "30"])
        assert code in (EXIT_OK, EXIT_UNCONVERGED)
        rows = _rows(out / "comparison_long.csv")
        fits = {(r["replicate"], r["model"]) for r in rows}
        assert fits == {(str(r), m) for r in range(2) for m in ("sdme", "weighted")}
        assert "true value" in (out / "report.md").read_text()

    def test_zero_replicates(self, tmp_path):
        assert main(["compare", "-n", "0", "--seed", "1", "--out", str(tmp_path)]) == EXIT_ERROR


class TestAdjacency:
    def test_edges_and_geojson(self, data_dir, tmp_path):
        assert main(["adjacency", str(data_dir / "sites.csv"), "--out", str(tmp_path), "--geojson"]) == EXIT_OK
        assert (tmp_path / "edges.csv").read_bytes() == (data_dir / "edges.csv").read_bytes()
        doc = json.loads((tmp_path / "cells.geojson").read_text())
        assert len(doc["features"]) == 25

    def test_bbox_must_contain_sites(self, data_dir, tmp_path):
        code = main(["adjacency", str(data_dir / "sites.csv"), "--out", str(tmp_path), "--bbox", "0", "0", "0.1", "0.1"])
        assert code == EXIT_ERROR
