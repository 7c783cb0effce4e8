"""Batch command line for simulation, estimation, and sensitivity analysis.

Each subcommand reads a single JSON configuration document (validated
against the schemas shipped under ``multitreat/schemas/``) and writes its
outputs into a directory; a handful of flags override top-level scalars of
the document.  Tables printed to the terminal are rounded to two decimals,
files keep full precision.  Exit codes: 0 success, 2 invalid configuration
or input, 3 estimation failure.

``MULTITREAT_WORKERS`` sets the default worker count when neither a flag
nor the configuration names one; results do not depend on the worker count.
"""

import functools
import json
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import click
import jsonschema
import numpy as np
import pandas as pd

from . import sensitivity
from .bart import BartPriors
from .data import Dataset
from .estimators import (
    CommonSupportReport,
    MatchResult,
    MethodSpec,
    estimate_effects,
)
from .sensitivity import ConfoundingFunctionPrior, SaConfig
from .simulate import SimConfig, simulate, write_outputs
from .validation import EstimationError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ESTIMATION = 3

_WORKERS_ENV = "MULTITREAT_WORKERS"

_CONFIG_SCHEMA = {"simulate": "simulate_config", "estimate": "estimate_config",
                  "sa": "sa_config"}

_BOX_STATS = ("min", "q1", "median", "q3", "max")


# ---------------------------------------------------------------------------
# configuration loading


@dataclass
class RunConfig:
    """One validated run: subcommand, parsed payload, seed, and workers."""

    subcommand: str
    payload: object                # SimConfig | MethodSpec | SaConfig
    doc: dict                      # schema-validated source document
    seed: object = None
    workers: int = 1
    prior: ConfoundingFunctionPrior | None = None
    target_pair: tuple | None = None


@functools.lru_cache(maxsize=None)
def _schema(name):
    text = (resources.files(__package__) / f"schemas/{name}.schema.json").read_text()
    return json.loads(text)


def _check_schema(doc, name):
    validator = jsonschema.Draft202012Validator(_schema(name))
    errors = sorted(validator.iter_errors(doc),
                    key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        err = errors[0]
        where = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}"
                              for p in err.absolute_path)
        raise ValidationError(f"config violates the {name} schema at "
                              f"{where}: {err.message}")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return str(path)


def _seed_from(doc):
    seed = doc.get("seed")
    return tuple(int(v) for v in seed) if isinstance(seed, list) else seed


def _workers_from(doc):
    if doc.get("workers") is not None:
        return int(doc["workers"])
    env = os.environ.get(_WORKERS_ENV)
    if env is None or env == "":
        return 1
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"{_WORKERS_ENV} must be an integer, got {env!r}")


def load_run_config(subcommand, config_path, overrides=None) -> RunConfig:
    """Read, override, schema-check, and parse one configuration document."""
    doc = _read_json(config_path)
    if not isinstance(doc, dict):
        raise ValidationError("config root must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            doc[key] = value
    _check_schema(doc, _CONFIG_SCHEMA[subcommand])
    seed = _seed_from(doc)
    workers = _workers_from(doc)
    prior = target = None
    if subcommand == "simulate":
        payload = SimConfig.from_json_dict({k: v for k, v in doc.items()
                                            if k != "seed"})
    elif subcommand == "estimate":
        payload = _method_spec(doc, workers)
    else:
        payload, prior, target = _sa_payload(doc, workers)
    return RunConfig(subcommand=subcommand, payload=payload, doc=doc,
                     seed=seed, workers=workers, prior=prior,
                     target_pair=target)


def _method_spec(doc, workers):
    body = dict(doc)
    body["workers"] = workers
    if body.get("trim_perc") is not None:
        body["trim_perc"] = tuple(body["trim_perc"])
    if body.get("library") is not None:
        body["library"] = tuple(body["library"])
    if isinstance(body.get("seed"), list):
        body["seed"] = tuple(body["seed"])
    if body.get("bart_priors") is not None:
        body["bart_priors"] = BartPriors(**body["bart_priors"])
    return MethodSpec(**body)


def _sa_payload(doc, workers):
    body = {k: v for k, v in doc.items() if k not in ("prior", "target_pair")}
    body["workers"] = workers
    if isinstance(body.get("seed"), list):
        body["seed"] = tuple(body["seed"])
    config = SaConfig(**body)
    prior = _parse_prior(doc["prior"])
    target = doc.get("target_pair")
    if target is not None:
        target = (int(target[0]), int(target[1]))
    return config, prior, target


def _parse_prior(d) -> ConfoundingFunctionPrior:
    stratum = d.get("stratum")
    if "matrix" in d:
        return ConfoundingFunctionPrior.from_matrix(
            d["matrix"], n_trt=int(d.get("n_trt", 3)), stratum=stratum)
    entries = {}
    for key, value in d["pairs"].items():
        a, b = (int(part) for part in key.split(","))
        entries[(a, b)] = value
    return ConfoundingFunctionPrior(entries=entries, stratum=stratum)


def _jsonable(obj):
    if isinstance(obj, CommonSupportReport):
        return obj.to_json_dict()
    if isinstance(obj, MatchResult):
        return {"n_matched": int(obj.n_matched), "caliper": float(obj.caliper),
                "triplets": obj.triplets.tolist()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.bool_)):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


# ---------------------------------------------------------------------------
# subcommand bodies


def run_simulate(config: RunConfig, out_dir) -> dict:
    """Generate one dataset; writes dataset.csv, truth.csv, summary.json."""
    out = simulate(config.payload, config.seed)
    paths = write_outputs(out, out_dir, include_truth=True)
    shares = "  ".join(f"w={k}: {v:.2f}" for k, v in out.ratio_of_units.items())
    prev = "  ".join(f"{k if k == 'overall' else 'w=' + k}: {v:.2f}"
                     for k, v in out.y_prev.items())
    click.echo(f"arm shares  {shares}")
    click.echo(f"prevalence  {prev}")
    for path in paths.values():
        click.echo(f"wrote {path}")
    return paths


def run_estimate(config: RunConfig, dataset_path, out_dir) -> dict:
    """Estimate effects on a dataset file; writes results.json, diagnostics.json."""
    ds = Dataset.from_csv(dataset_path)
    result = estimate_effects(ds, config.payload)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": _write_json(out_dir / "results.json",
                               result.table.to_json_dict()),
        "diagnostics": _write_json(out_dir / "diagnostics.json", {
            "diagnostics": _jsonable(result.diagnostics),
            "support": result.support.to_json_dict() if result.support else None,
        }),
    }
    click.echo(result.table.render())
    for path in paths.values():
        click.echo(f"wrote {path}")
    return paths


def run_sa(config: RunConfig, dataset_path, out_dir) -> dict:
    """Sensitivity analysis on a dataset file; writes sa_results.json
    (plus contour.csv when the prior carries seq() grids)."""
    ds = Dataset.from_csv(dataset_path)
    sa_config, prior, target = config.payload, config.prior, config.target_pair
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if prior.gridded_pairs():
        if target is None:
            raise ValidationError("gridded priors need target_pair")
        grid = sensitivity.contour_grid(ds, prior, sa_config, target)
        doc = grid.to_json_dict()
        doc["_metadata"] = {"method": "SA-BART", "estimand": sa_config.estimand,
                            "reference": sa_config.reference, "m1": sa_config.m1,
                            "m2": sa_config.m2, "ndpost": sa_config.ndpost,
                            "n": ds.n}
        paths = {
            "sa_results": _write_json(out_dir / "sa_results.json", doc),
            "contour": str(out_dir / "contour.csv"),
        }
        pd.DataFrame(grid.to_rows()).to_csv(paths["contour"], index=False)
        click.echo(f"{grid.target} over {len(grid.a_values)} x "
                   f"{len(grid.b_values)} confounding grid "
                   f"c{grid.pair_a} x c{grid.pair_b}")
    else:
        if target is not None:
            raise ValidationError("target_pair is only used with seq() grid priors")
        result = sensitivity.run_sa(ds, prior, sa_config)
        paths = {"sa_results": _write_json(out_dir / "sa_results.json",
                                           result.table.to_json_dict())}
        click.echo(result.table.render())
        click.echo(result.note)
    for path in paths.values():
        click.echo(f"wrote {path}")
    return paths


def emit_plot_data(kind, input_path, out_path) -> str:
    """Write the tidy long-format CSV behind one figure; no rendering here."""
    doc = _read_json(input_path)
    if kind == "overlap-boxplot":
        records = doc.get("overlap_data")
        if records is None:
            raise ValidationError(f"{input_path} has no overlap_data; "
                                  "expected a simulation summary.json")
        rows = [{"group": f"w={r['group']}", "variable": f"gps{r['gps_column']}",
                 "statistic": stat, "value": r[stat]}
                for r in records for stat in _BOX_STATS]
    elif kind == "weight-boxplot":
        summaries = doc.get("diagnostics", {}).get("weights")
        if summaries is None:
            raise ValidationError(f"{input_path} has no weight summaries; "
                                  "expected diagnostics.json from a weighting run")
        rows = []
        for key, panel in (("pre_trim", "before-trim"), ("post_trim", "after-trim")):
            for arm, summary in summaries[key].items():
                rows += [{"panel": panel, "group": f"w={arm}",
                          "variable": "weight", "statistic": stat,
                          "value": summary[stat]} for stat in _BOX_STATS]
    elif kind == "contour":
        if "estimates" not in doc:
            raise ValidationError(f"{input_path} has no contour estimates; "
                                  "expected sa_results.json from a gridded run")
        rows = [{"c_pair_a": a, "c_pair_b": b, "estimate": doc["estimates"][i][j]}
                for i, a in enumerate(doc["a_values"])
                for j, b in enumerate(doc["b_values"])]
    else:
        raise ValidationError(f"unknown plot kind {kind!r}")
    pd.DataFrame(rows).to_csv(out_path, index=False)
    return str(out_path)


# ---------------------------------------------------------------------------
# click surface


def _cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except EstimationError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_ESTIMATION)
    return wrapper


_config_opt = click.option(
    "--config", "-c", "config_path", required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="JSON configuration document.")
_dataset_opt = click.option(
    "--dataset", "-d", "dataset_path", required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Dataset CSV with columns w, y, and covariates.")
_outdir_opt = click.option(
    "--out-dir", "-o", "out_dir", required=True,
    type=click.Path(file_okay=False, path_type=Path))
_seed_opt = click.option("--seed", type=int, default=None,
                         help="Override the config seed.")
_workers_opt = click.option("--workers", type=int, default=None,
                            help=f"Worker count (default from {_WORKERS_ENV}).")


@click.group()
def main():
    """Effects of multiple treatments on binary outcomes: simulate confounded
    data, estimate pairwise effects, and stress-test them against unmeasured
    confounding."""


@main.command("simulate")
@_config_opt
@_outdir_opt
@_seed_opt
@click.option("--sample-size", type=int, default=None,
              help="Override the config sample_size.")
@_cli_errors
def _simulate_cmd(config_path, out_dir, seed, sample_size):
    """Generate a dataset with known truth."""
    config = load_run_config("simulate", config_path,
                             {"seed": seed, "sample_size": sample_size})
    run_simulate(config, out_dir)


@main.command("estimate")
@_config_opt
@_dataset_opt
@_outdir_opt
@_seed_opt
@_workers_opt
@click.option("--method", default=None, help="Override the config method.")
@click.option("--estimand", default=None, type=click.Choice(["ATE", "ATT"]))
@click.option("--reference-trt", type=int, default=None,
              help="Reference arm for ATT contrasts.")
@_cli_errors
def _estimate_cmd(config_path, dataset_path, out_dir, seed, workers, method,
                  estimand, reference_trt):
    """Estimate pairwise treatment effects on a dataset."""
    config = load_run_config("estimate", config_path,
                             {"seed": seed, "workers": workers,
                              "method": method, "estimand": estimand,
                              "reference_trt": reference_trt})
    run_estimate(config, dataset_path, out_dir)


@main.command("sa")
@_config_opt
@_dataset_opt
@_outdir_opt
@_seed_opt
@_workers_opt
@click.option("--m1", type=int, default=None, help="Override the config m1.")
@click.option("--m2", type=int, default=None, help="Override the config m2.")
@_cli_errors
def _sa_cmd(config_path, dataset_path, out_dir, seed, workers, m1, m2):
    """Sensitivity analysis under priors on unmeasured confounding."""
    config = load_run_config("sa", config_path,
                             {"seed": seed, "workers": workers,
                              "m1": m1, "m2": m2})
    run_sa(config, dataset_path, out_dir)


@main.command("plot-data")
@click.option("--kind", required=True,
              type=click.Choice(["overlap-boxplot", "weight-boxplot", "contour"]))
@click.option("--input", "-i", "input_path", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="summary.json, diagnostics.json, or sa_results.json.")
@click.option("--out", "-o", "out_path", required=True,
              type=click.Path(dir_okay=False, path_type=Path))
@_cli_errors
def _plot_data_cmd(kind, input_path, out_path):
    """Emit the tidy CSV behind one figure."""
    path = emit_plot_data(kind, input_path, out_path)
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
