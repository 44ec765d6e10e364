"""CSV and JSON file formats shared by the simulator, fitter and CLI.

All writers are atomic (temporary file then rename), UTF-8 with LF line
endings and a mandatory header. Floats are written with ``repr`` so that a
read followed by a write reproduces the file byte for byte; missing values are
empty fields.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import MISSING, ClassificationSet
from .spatial import SpatialGraph

SCHEMA_VERSION = "1"

PARTITIONS = ("training", "testing", "unsampled")


class SchemaError(ValueError):
    pass


# --------------------------------------------------------------------------
# low-level helpers


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return ""
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv(path, required: Sequence[str]) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read ({exc.strerror})") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{path}: empty file, header row is mandatory") from None
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{path}:1: missing columns {missing}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
        rows.append(row)
    return header, rows


def _parse(path, lineno: int, col: str, text: str, kind, optional: bool = False):
    if text == "":
        if optional:
            return math.nan if kind is float else MISSING
        raise SchemaError(f"{path}:{lineno}: column {col!r} is empty")
    try:
        return kind(text)
    except ValueError:
        raise SchemaError(f"{path}:{lineno}: column {col!r} has invalid value {text!r}") from None


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


# --------------------------------------------------------------------------
# sites


@dataclass
class SiteTable:
    """Per-site attributes. ``y_true`` is NaN where unknown; ``x`` excludes the intercept."""

    site_id: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    partition: np.ndarray
    y_true: np.ndarray
    x: np.ndarray
    covariate_names: list[str]

    def __post_init__(self):
        self.site_id = np.asarray(self.site_id, dtype=np.int64)
        self.lon = np.asarray(self.lon, dtype=float)
        self.lat = np.asarray(self.lat, dtype=float)
        self.partition = np.asarray(self.partition, dtype=object)
        self.y_true = np.asarray(self.y_true, dtype=float)
        self.x = np.asarray(self.x, dtype=float).reshape(len(self.site_id), -1)
        bad = set(self.partition.tolist()) - set(PARTITIONS)
        if bad:
            raise SchemaError(f"unknown partition labels {sorted(bad)}")
        if len(np.unique(self.site_id)) != len(self.site_id):
            raise SchemaError("site_id values must be unique")
        if len(self.covariate_names) != self.x.shape[1]:
            raise SchemaError("covariate_names does not match x")

    def __len__(self) -> int:
        return len(self.site_id)

    def mask(self, partition: str) -> np.ndarray:
        return self.partition == partition

    def counts(self) -> dict[str, int]:
        return {p: int(np.sum(self.partition == p)) for p in PARTITIONS}


def write_sites(path, sites: SiteTable) -> None:
    header = ["site_id", "lon", "lat", "partition", "y_true"] + list(sites.covariate_names)
    rows = (
        [sites.site_id[j], sites.lon[j], sites.lat[j], sites.partition[j], sites.y_true[j], *sites.x[j]]
        for j in range(len(sites))
    )
    write_csv(path, header, rows)


def read_sites(path) -> SiteTable:
    header, rows = read_csv(path, ["site_id", "lon", "lat", "partition"])
    covs = [h for h in header if h not in ("site_id", "lon", "lat", "partition", "y_true")]
    idx = {h: k for k, h in enumerate(header)}
    sid, lon, lat, part, yt, x = [], [], [], [], [], []
    for n, row in enumerate(rows, start=2):
        sid.append(_parse(path, n, "site_id", row[idx["site_id"]], int))
        lon.append(_parse(path, n, "lon", row[idx["lon"]], float))
        lat.append(_parse(path, n, "lat", row[idx["lat"]], float))
        p = row[idx["partition"]]
        if p not in PARTITIONS:
            raise SchemaError(f"{path}:{n}: partition must be one of {PARTITIONS}, got {p!r}")
        part.append(p)
        yt.append(_parse(path, n, "y_true", row[idx["y_true"]], float, optional=True) if "y_true" in idx else math.nan)
        x.append([_parse(path, n, c, row[idx[c]], float) for c in covs])
    return SiteTable(sid, lon, lat, part, yt, np.asarray(x, dtype=float).reshape(len(rows), len(covs)), covs)


# --------------------------------------------------------------------------
# classifications and edges


def write_classifications(path, cs: ClassificationSet) -> None:
    header = ["subject_id", "image_id", "point_id", "z", "true_label"]
    tl = [None if t == MISSING else int(t) for t in cs.true_label]
    rows = zip(cs.subject.tolist(), cs.image.tolist(), cs.point.tolist(), cs.z.tolist(), tl)
    write_csv(path, header, rows)


def read_classifications(path) -> ClassificationSet:
    header, rows = read_csv(path, ["subject_id", "image_id", "point_id", "z"])
    idx = {h: k for k, h in enumerate(header)}
    has_tl = "true_label" in idx
    n = len(rows)
    out = np.empty((n, 5), dtype=np.int64)
    for r, row in enumerate(rows):
        ln = r + 2
        out[r, 0] = _parse(path, ln, "subject_id", row[idx["subject_id"]], int)
        out[r, 1] = _parse(path, ln, "image_id", row[idx["image_id"]], int)
        out[r, 2] = _parse(path, ln, "point_id", row[idx["point_id"]], int)
        out[r, 3] = _parse(path, ln, "z", row[idx["z"]], int)
        out[r, 4] = _parse(path, ln, "true_label", row[idx["true_label"]], int, optional=True) if has_tl else MISSING
        if out[r, 3] not in (0, 1):
            raise SchemaError(f"{path}:{ln}: z must be 0 or 1")
        if out[r, 4] not in (0, 1, MISSING):
            raise SchemaError(f"{path}:{ln}: true_label must be 0, 1 or empty")
    return ClassificationSet(out[:, 0], out[:, 1], out[:, 2], out[:, 3], out[:, 4])


def write_edges(path, graph: SpatialGraph) -> None:
    write_csv(path, ["l", "t"], graph.to_edge_rows())


def read_edges(path, site_ids) -> SpatialGraph:
    _, rows = read_csv(path, ["l", "t"])
    pairs = []
    for n, row in enumerate(rows, start=2):
        l = _parse(path, n, "l", row[0], int)
        t = _parse(path, n, "t", row[1], int)
        if not l < t:
            raise SchemaError(f"{path}:{n}: edges need l < t")
        pairs.append((l, t))
    return SpatialGraph.from_edge_rows(site_ids, pairs)


# --------------------------------------------------------------------------
# draws


def write_draws(path, names: Sequence[str], draws: np.ndarray) -> None:
    """``draws`` has shape (chains, iterations, parameters)."""
    n_chain, n_iter, _ = draws.shape
    rows = ([c, t, *draws[c, t]] for c in range(n_chain) for t in range(n_iter))
    write_csv(path, ["chain", "iter", *names], rows)


def read_draws(path) -> tuple[list[str], np.ndarray]:
    header, rows = read_csv(path, ["chain", "iter"])
    if header[:2] != ["chain", "iter"]:
        raise SchemaError(f"{path}:1: draws must start with columns chain,iter")
    names = header[2:]
    if not rows:
        raise SchemaError(f"{path}: no draws")
    try:
        arr = np.array([[float(v) for v in r] for r in rows])
    except ValueError:
        for n, r in enumerate(rows, start=2):
            for v, h in zip(r, header):
                _parse(path, n, h, v, float)
        raise
    chains = arr[:, 0].astype(int)
    n_chain = chains.max() + 1
    per = np.bincount(chains, minlength=n_chain)
    if np.any(per != per[0]):
        raise SchemaError(f"{path}: chains have unequal lengths {per.tolist()}")
    order = np.lexsort((arr[:, 1], chains))
    arr = arr[order]
    return names, arr[:, 2:].reshape(n_chain, per[0], len(names))
