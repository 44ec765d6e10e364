"""Command line interface: ``sdme simulate | fit | predict | compare | diagnose | adjacency``.

Exit codes: 0 success, 1 usage or I/O error, 2 finished with a convergence warning.
"""

from __future__ import annotations

import logging
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import __version__
from .io import (
    SCHEMA_VERSION,
    SchemaError,
    SiteTable,
    read_classifications,
    read_csv,
    read_draws,
    read_edges,
    read_json,
    read_sites,
    write_classifications,
    write_csv,
    write_draws,
    write_edges,
    write_json,
    atomic_write_text,
)

EXIT_OK, EXIT_ERROR, EXIT_UNCONVERGED = 0, 1, 2

log = logging.getLogger("sdme")


class Unconverged(Exception):
    pass


def _manifest(command: str, **fields) -> dict:
    return {"schema_version": SCHEMA_VERSION, "sdme_version": __version__, "command": command, **fields}


def _load_json_config(path) -> dict:
    if path is None:
        return {}
    cfg = read_json(path)
    if not isinstance(cfg, dict):
        raise SchemaError(f"{path}: top level must be a JSON object")
    return cfg


def _sampler_config(cfg: dict, chains, n_iter, warmup, thin, seed):
    from .sampler import SamplerConfig

    d = dict(cfg.get("sampler", {}))
    for key, val in (("n_chains", chains), ("n_iter", n_iter), ("n_warmup", warmup), ("thin", thin), ("seed", seed)):
        if val is not None:
            d[key] = val
    return SamplerConfig(**d)


@click.group()
@click.version_option(__version__, prog_name="sdme")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Spatially dependent misclassification error models for crowdsourced proportions."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


# --------------------------------------------------------------------------
# simulate


def write_dataset(out: Path, ds, manifest: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    from .io import write_sites

    write_sites(out / "sites.csv", ds.sites)
    write_classifications(out / "classifications.csv", ds.classifications)
    write_edges(out / "edges.csv", ds.graph)
    write_json(out / "truth.json", ds.truth())
    write_json(out / "manifest.json", manifest)


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON simulation config; omitted fields take defaults.")
@click.option("--seed", type=int, required=True, help="Random seed (required).")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--grid-k", type=int, help="Grid side length (k x k sites).")
@click.option("--sampled-fraction", type=float, help="Share of sites with images.")
def simulate(config_path, seed, out, grid_k, sampled_fraction):
    """Simulate a dataset and write sites, classifications, edges and truth."""
    from .simulate import SimulationConfig, simulate_dataset

    d = _load_json_config(config_path)
    d["seed"] = seed
    if grid_k is not None:
        d["grid_k"] = grid_k
    if sampled_fraction is not None:
        d["sampled_fraction"] = sampled_fraction
    cfg = SimulationConfig.from_dict(d)
    ds = simulate_dataset(cfg)
    manifest = _manifest("simulate", seed=seed, config=cfg.to_dict(), partition_counts=ds.sites.counts())
    write_dataset(Path(out), ds, manifest)
    click.echo(f"wrote {len(ds.sites)} sites, {len(ds.classifications)} classifications to {out}")


# --------------------------------------------------------------------------
# fit


def load_data(data_dir: Path, standardize: bool = False):
    from .inference import FitData

    sites = read_sites(data_dir / "sites.csv")
    cs = read_classifications(data_dir / "classifications.csv")
    graph = read_edges(data_dir / "edges.csv", sites.site_id)
    q = None
    man = data_dir / "manifest.json"
    if man.exists():
        q = read_json(man).get("config", {}).get("points_per_image")
    if standardize and sites.x.shape[1]:
        x = sites.x
        sd = x.std(axis=0, ddof=1)
        sd[sd == 0] = 1.0
        sites = SiteTable(
            sites.site_id, sites.lon, sites.lat, sites.partition, sites.y_true, (x - x.mean(0)) / sd, sites.covariate_names
        )
    return FitData(sites, graph, cs, q)


def write_fit(out: Path, res, manifest: dict) -> None:
    from .inference import SUMMARY_COLUMNS, latent_posterior

    out.mkdir(parents=True, exist_ok=True)
    write_draws(out / "draws.csv", res.draws.names, res.draws.draws)
    dg = res.diagnostics.as_dict()
    dg["converged"] = res.converged
    dg["divergence_rate"] = res.draws.divergence_rate
    dg["step_size"] = res.draws.step_size.tolist()
    dg["max_rhat_core"] = res.diagnostics.max_rhat(res.core_parameters())
    write_json(out / "diagnostics.json", dg)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, ([r[c] for c in SUMMARY_COLUMNS] for r in res.summary))
    cols = ["site_id", "mean", "sd", "hdi_lo", "hdi_hi", "quintile"]
    write_csv(out / "latent_posterior.csv", cols, ([r[c] for c in cols] for r in latent_posterior(res)))
    write_json(out / "manifest.json", manifest)


@cli.command()
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--model", type=click.Choice(["sdme", "weighted", "naive"]), default="sdme", show_default=True)
@click.option("--chains", type=int, help="Number of chains [3].")
@click.option("--iter", "n_iter", type=int, help="Iterations per chain including warmup [8000].")
@click.option("--warmup", type=int, help="Warmup iterations [4000].")
@click.option("--thin", type=int, help="Keep every n-th draw [3].")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help='JSON with optional "model" and "sampler" objects.')
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--standardize", is_flag=True, help="Centre and scale covariates before fitting.")
@click.option("--init", "init_strategy", type=click.Choice(["data-informed", "prior-jitter"]), default="data-informed", show_default=True)
@click.option("--exclude-below", type=float, help="Drop subjects with training accuracy below this value.")
def fit(data_dir, model, chains, n_iter, warmup, thin, seed, config_path, out, standardize, init_strategy, exclude_below):
    """Fit a model to DATA_DIR and write draws, diagnostics and summaries."""
    from .inference import fit as run_fit
    from .model import ModelConfig

    cfg = _load_json_config(config_path)
    mcfg = ModelConfig.from_dict({**cfg.get("model", {}), "kind": model})
    scfg = _sampler_config(cfg, chains, n_iter, warmup, thin, seed)
    data = load_data(Path(data_dir), standardize)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = run_fit(data, mcfg, scfg, init_strategy=init_strategy, exclude_below=exclude_below)
    manifest = _manifest(
        "fit",
        data_dir=str(data_dir),
        model=asdict(mcfg),
        sampler=scfg.to_dict(),
        standardize=standardize,
        init=init_strategy,
        exclude_below=exclude_below,
        converged=res.converged,
    )
    write_fit(Path(out), res, manifest)
    click.echo(f"{model}: {res.draws.n_chains} chains x {res.draws.n_kept} draws written to {out}")
    if not res.converged:
        click.echo(f"warning: R-hat above 1.1 (max {res.diagnostics.max_rhat(res.core_parameters()):.3f})", err=True)
        raise Unconverged()


# --------------------------------------------------------------------------
# predict


@cli.command()
@click.argument("fit_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--data-dir", type=click.Path(exists=True, file_okay=False), help="Data used for the fit [from its manifest].")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory [FIT_DIR].")
def predict(fit_dir, data_dir, out):
    """Posterior of y at unsampled sites; scored against truth.json when present."""
    fit_dir = Path(fit_dir)
    man = read_json(fit_dir / "manifest.json")
    data_dir = Path(data_dir or man["data_dir"])
    out = Path(out or fit_dir)
    sites = read_sites(data_dir / "sites.csv")
    header, rows = read_csv(fit_dir / "latent_posterior.csv", ["site_id", "mean", "sd", "hdi_lo", "hdi_hi", "quintile"])
    by_site = {int(r[0]): r for r in rows}
    uns = sites.site_id[sites.partition == "unsampled"]
    missing = [int(s) for s in uns if int(s) not in by_site]
    if missing:
        raise SchemaError(f"latent_posterior.csv lacks unsampled sites {missing[:5]}")
    out.mkdir(parents=True, exist_ok=True)
    pred_rows = [by_site[int(s)] for s in uns]
    atomic_write_text(out / "prediction.csv", ",".join(header) + "\n" + "".join(",".join(r) + "\n" for r in pred_rows))
    report = {"n_unsampled": len(uns)}
    truth_path = data_dir / "truth.json"
    if truth_path.exists():
        from .inference import quintile_classes

        truth = read_json(truth_path)["y"]
        y_true = np.array([truth[str(int(s))] for s in sites.site_id])
        lo = np.array([float(by_site[int(s)][3]) for s in sites.site_id])
        hi = np.array([float(by_site[int(s)][4]) for s in sites.site_id])
        est_cls = np.array([int(by_site[int(s)][5]) for s in sites.site_id])
        tru_cls = quintile_classes(y_true)
        m = sites.partition == "unsampled"
        inside = (lo <= y_true) & (y_true <= hi)
        report.update(
            coverage=float(inside.mean()),
            coverage_unsampled=float(inside[m].mean()) if m.any() else None,
            quintile_matches_unsampled=int(np.sum(est_cls[m] == tru_cls[m])),
        )
    write_json(out / "prediction_report.json", report)
    click.echo(" ".join(f"{k}={v}" for k, v in report.items()))


# --------------------------------------------------------------------------
# compare


@cli.command()
@click.option("-n", "--n-replicates", type=int, required=True)
@click.option("--seed", type=int, required=True, help="Seed of the first replicate; replicate r uses seed + r.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help='JSON with optional "simulation", "model" and "sampler" objects.')
@click.option("--models", default="sdme,weighted", show_default=True)
@click.option("--chains", type=int)
@click.option("--iter", "n_iter", type=int)
@click.option("--warmup", type=int)
@click.option("--thin", type=int)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def compare(n_replicates, seed, config_path, models, chains, n_iter, warmup, thin, out):
    """Simulate replicates, fit each model to each, and report posterior means."""
    from .inference import ComparisonReport, replicate_study
    from .simulate import SimulationConfig

    if n_replicates < 1:
        raise click.UsageError("-n must be at least 1")
    cfg = _load_json_config(config_path)
    sim = SimulationConfig.from_dict({**cfg.get("simulation", {}), "seed": seed})
    scfg = _sampler_config(cfg, chains, n_iter, warmup, thin, seed)
    kinds = tuple(m.strip() for m in models.split(",") if m.strip())
    bad = set(kinds) - {"sdme", "weighted", "naive"}
    if bad:
        raise click.UsageError(f"unknown models {sorted(bad)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rep = replicate_study(n_replicates, sim, scfg, kinds, cfg.get("model"))
    cols = ComparisonReport.COLUMNS
    write_csv(out / "comparison_long.csv", cols, ([r[c] for c in cols] for r in rep.rows))
    atomic_write_text(out / "report.md", rep.markdown())
    write_json(
        out / "manifest.json",
        _manifest("compare", seed=seed, n_replicates=n_replicates, models=list(kinds), simulation=sim.to_dict(), sampler=scfg.to_dict()),
    )
    click.echo(rep.markdown())
    if any(not r["converged"] for r in rep.rows):
        click.echo("warning: some replicate fits did not converge", err=True)
        raise Unconverged()


# --------------------------------------------------------------------------
# diagnose


@cli.command()
@click.argument("draws_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--grid", type=int, default=200, show_default=True, help="Density grid points.")
def diagnose(draws_file, out, grid):
    """R-hat/ESS per parameter plus trace and density CSVs for plotting."""
    from scipy import stats

    from .sampler.diagnostics import diagnose as run_diagnose

    names, draws = read_draws(draws_file)
    if draws.shape[1] < 4:
        raise SchemaError(f"{draws_file}: need at least 4 draws per chain")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dg = run_diagnose(names, draws)
    write_json(out / "diagnostics.json", dg.as_dict())
    n_chain, n_iter, _ = draws.shape
    write_csv(
        out / "trace.csv",
        ["chain", "iter", "parameter", "value"],
        ((c, t, n, draws[c, t, k]) for k, n in enumerate(names) for c in range(n_chain) for t in range(n_iter)),
    )
    dens_rows = []
    for k, n in enumerate(names):
        x = draws[:, :, k].ravel()
        if np.ptp(x) == 0:
            continue
        kde = stats.gaussian_kde(x)
        pad = 3.0 * kde.factor * x.std()
        g = np.linspace(x.min() - pad, x.max() + pad, grid)
        dens_rows.extend((n, gx, gd) for gx, gd in zip(g, kde(g)))
    write_csv(out / "density.csv", ["parameter", "x", "density"], dens_rows)
    click.echo(f"diagnosed {len(names)} parameters; max R-hat {np.nanmax(dg.rhat):.3f}")


# --------------------------------------------------------------------------
# adjacency


@cli.command()
@click.argument("sites_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--bbox", nargs=4, type=float, help="xmin ymin xmax ymax [extent padded 5%].")
@click.option("--geojson", is_flag=True, help="Also write clipped Voronoi cells as GeoJSON.")
def adjacency(sites_csv, out, bbox, geojson):
    """Voronoi adjacency (shared edge of positive length) for sites with lon/lat."""
    from .spatial import BoundingBox, SiteCoordinates, build_voronoi_adjacency, cells_geojson

    _, rows = read_csv(sites_csv, ["site_id", "lon", "lat"])
    header = read_csv(sites_csv, ["site_id", "lon", "lat"])[0]
    i, x, y = header.index("site_id"), header.index("lon"), header.index("lat")
    try:
        coords = SiteCoordinates([int(r[i]) for r in rows], [float(r[x]) for r in rows], [float(r[y]) for r in rows])
    except ValueError as exc:
        raise SchemaError(f"{sites_csv}: {exc}") from None
    box = BoundingBox(*bbox) if bbox else None
    graph = build_voronoi_adjacency(coords, box)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_edges(out / "edges.csv", graph)
    if geojson:
        atomic_write_text(out / "cells.geojson", cells_geojson(coords, box))
    click.echo(f"{graph.n_edges} edges among {graph.n_sites} sites")


def main(argv=None) -> int:
    """Entry point mapping failures onto the documented exit codes."""
    from .sampler import SamplerError
    from .sampler.init import InitError

    try:
        cli.main(args=argv, prog_name="sdme", standalone_mode=False)
    except Unconverged:
        return EXIT_UNCONVERGED
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_ERROR
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_ERROR
    except (SchemaError, OSError, ValueError, SamplerError, InitError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
