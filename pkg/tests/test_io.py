from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdme.io import (
    SchemaError,
    read_classifications,
    read_draws,
    read_edges,
    read_json,
    read_sites,
    write_classifications,
    write_draws,
    write_edges,
    write_json,
    write_sites,
)
from sdme.simulate import SimulationConfig, simulate_dataset


@pytest.fixture(scope="module")
def dataset():
    return simulate_dataset(SimulationConfig(grid_k=5, seed=3))


class TestRoundTrip:
    def test_sites(self, dataset, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_sites(a, dataset.sites)
        s = read_sites(a)
        write_sites(b, s)
        assert a.read_bytes() == b.read_bytes()
        assert np.array_equal(s.partition, dataset.sites.partition)
        assert np.array_equal(np.isnan(s.y_true), np.isnan(dataset.sites.y_true))

    def test_classifications(self, dataset, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_classifications(a, dataset.classifications)
        cs = read_classifications(a)
        write_classifications(b, cs)
        assert a.read_bytes() == b.read_bytes()
        assert np.array_equal(cs.true_label, dataset.classifications.true_label)

    def test_edges(self, dataset, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_edges(a, dataset.graph)
        g = read_edges(a, dataset.sites.site_id)
        write_edges(b, g)
        assert a.read_bytes() == b.read_bytes()
        assert g.edge_set() == dataset.graph.edge_set()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
    def test_draws_are_exact(self, tmp_path_factory, n_chain, n_iter, n_par, seed):
        d = np.random.default_rng(seed).normal(size=(n_chain, n_iter, n_par)) * 10.0 ** np.arange(n_par)
        path = tmp_path_factory.mktemp("d") / "draws.csv"
        names = [f"p[{k}]" for k in range(n_par)]
        write_draws(path, names, d)
        got_names, got = read_draws(path)
        assert got_names == names
        assert np.array_equal(got, d)

    def test_json_numpy_values(self, tmp_path):
        p = tmp_path / "x.json"
        write_json(p, {"a": np.int64(3), "b": np.array([0.5, 1.5])})
        assert read_json(p) == {"a": 3, "b": [0.5, 1.5]}


class TestSchemaErrors:
    def _write(self, tmp_path, text):
        p = tmp_path / "f.csv"
        p.write_text(text)
        return p

    def test_missing_column(self, tmp_path):
        p = self._write(tmp_path, "site_id,lon,lat\n1,0,0\n")
        with pytest.raises(SchemaError, match=r"f\.csv:1: missing columns \['partition'\]"):
            read_sites(p)

    def test_bad_value_names_line(self, tmp_path):
        p = self._write(tmp_path, "site_id,lon,lat,partition\n1,0,0,training\n2,zero,0,testing\n")
        with pytest.raises(SchemaError, match=r"f\.csv:3: column 'lon'"):
            read_sites(p)

    def test_unknown_partition(self, tmp_path):
        p = self._write(tmp_path, "site_id,lon,lat,partition\n1,0,0,holdout\n")
        with pytest.raises(SchemaError, match=r":2: partition"):
            read_sites(p)

    def test_ragged_row(self, tmp_path):
        p = self._write(tmp_path, "subject_id,image_id,point_id,z\n1,1,1,0\n1,1,2\n")
        with pytest.raises(SchemaError, match=r":3: expected 4 fields"):
            read_classifications(p)

    def test_label_out_of_range(self, tmp_path):
        p = self._write(tmp_path, "subject_id,image_id,point_id,z,true_label\n1,1,1,2,\n")
        with pytest.raises(SchemaError, match=r":2: z must be 0 or 1"):
            read_classifications(p)

    def test_edge_order(self, tmp_path):
        p = self._write(tmp_path, "l,t\n2,1\n")
        with pytest.raises(SchemaError, match=r":2: edges need l < t"):
            read_edges(p, [1, 2])

    def test_unequal_chains(self, tmp_path):
        p = self._write(tmp_path, "chain,iter,a\n0,0,1.0\n0,1,2.0\n1,0,3.0\n")
        with pytest.raises(SchemaError, match="unequal"):
            read_draws(p)

    def test_empty_and_missing_files(self, tmp_path):
        with pytest.raises(SchemaError, match="header row"):
            read_sites(self._write(tmp_path, ""))
        with pytest.raises(SchemaError, match="cannot read"):
            read_sites(tmp_path / "absent.csv")

    def test_invalid_json_line(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text('{\n  "a": 1,\n}\n')
        with pytest.raises(SchemaError, match=r"x\.json:3"):
            read_json(p)


def test_atomic_writes_leave_no_temporaries(dataset, tmp_path):
    write_sites(tmp_path / "s.csv", dataset.sites)
    write_json(tmp_path / "m.json", {"k": 1})
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.json", "s.csv"]
