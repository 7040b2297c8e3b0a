"""Command-line surface: estimate, simulate, bounds-compare, precision-test.

Exit codes are a stable contract: 0 success, 2 input error, 3 unidentified
design, 4 algorithmic non-convergence.  Every run writes a manifest.json
recording versions, resolved configuration, and seeds.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from .api import AteEstimator, BOUND_CHOICES, POINT_ESTIMATORS
from .bounds import BoundConvergenceError, as_bound, cluster_bound, iterative_bound, precision_test
from .covariates import spec_common_slopes, spec_separate_slopes, zero_center
from .dataio import (
    CsvFormatError,
    load_numeric_vector,
    parse_design_descriptor,
    read_experiment_csv,
    write_csv,
    write_manifest,
)
from .design import DesignError, UnidentifiedDesignError, design_matrix
from .estimators import AssignmentRealization, ObservedOutcomes
from .simulation import (
    COVARIATE_SET_IDS,
    ESTIMATOR_NAMES,
    SimConfig,
    calibration_r2,
    emit_report,
    run_simulation,
)

EXIT_INPUT = 2
EXIT_UNIDENTIFIED = 3
EXIT_NONCONVERGENCE = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _run_guarded(out_dir, body):
    try:
        return body()
    except UnidentifiedDesignError as exc:
        _fail(EXIT_UNIDENTIFIED, str(exc))
    except BoundConvergenceError as exc:
        os.makedirs(out_dir, exist_ok=True)
        trace_path = os.path.join(out_dir, "convergence_trace.txt")
        with open(trace_path, "w") as fh:
            fh.write("\n".join(repr(v) for v in exc.trace) + "\n")
        _fail(EXIT_NONCONVERGENCE, f"{exc} (trace written to {trace_path})")
    except (CsvFormatError, DesignError, ValueError, OSError, json.JSONDecodeError) as exc:
        _fail(EXIT_INPUT, str(exc))


@click.group(context_settings={"auto_envvar_prefix": "DBEXP"})
def main():
    """Design-based estimation and inference for randomized experiments."""


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(), help="experiment CSV")
@click.option("--design", "descriptor", required=True, help="design descriptor, e.g. complete:n1=20")
@click.option("--estimator", "estimator_names", multiple=True, default=("two_r",),
              type=click.Choice(POINT_ESTIMATORS), help="may be given multiple times")
@click.option("--spec", default="II", type=click.Choice(["I", "II"]), show_default=True)
@click.option("--bound", default="as", type=click.Choice(BOUND_CHOICES), show_default=True)
@click.option("--z", default=1.96, show_default=True, help="normal quantile for intervals")
@click.option("--out-dir", default="dbexp-out", show_default=True)
@click.option("--no-center", is_flag=True, help="skip zero-centering of covariates")
def estimate(data_path, descriptor, estimator_names, spec, bound, z, out_dir, no_center):
    """Estimate the average treatment effect from an experiment CSV."""

    def body():
        table = read_experiment_csv(data_path)
        design = parse_design_descriptor(descriptor, table)
        rows = []
        for name in estimator_names:
            model = AteEstimator(
                design,
                estimator=name,
                spec=spec,
                bound=bound,
                z=z,
                center=not no_center,
            )
            model.fit(
                table.outcome,
                table.treatment,
                covariates=table.covariates,
                cluster_ids=table.cluster_ids,
            )
            spec_name = "none" if model.spec_ is None else (
                f"cluster-{model.spec_.kind}" if model.spec_.level == "cluster" else model.spec_.kind
            )
            rows.append([
                name,
                spec_name,
                model.ate_,
                "" if model.variance_bound_ is None else model.variance_bound_,
                "" if model.ci_low_ is None else model.ci_low_,
                "" if model.ci_high_ is None else model.ci_high_,
                bound,
                model.truncated_,
            ])
        os.makedirs(out_dir, exist_ok=True)
        report = os.path.join(out_dir, "estimates.csv")
        write_csv(
            report,
            ["estimator", "spec", "point", "variance_bound", "ci_low", "ci_high", "bound", "truncated"],
            rows,
        )
        write_manifest(out_dir, "estimate", {
            "data": str(data_path), "design": descriptor, "estimators": list(estimator_names),
            "spec": spec, "bound": bound, "z": z, "center": not no_center,
        })
        for row in rows:
            click.echo(f"{row[0]}: point={row[2]:.6g}" + (
                f" ci=[{row[4]:.6g}, {row[5]:.6g}]" if row[4] != "" else ""))
        click.echo(f"report: {report}")

    _run_guarded(out_dir, body)


@main.command()
@click.option("--config", "config_path", type=click.Path(), help="JSON SimConfig (flags win)")
@click.option("--defaults", is_flag=True, help="run the full default configuration")
@click.option("--n-units", type=int, default=None)
@click.option("--n-clusters", type=int, default=None)
@click.option("--m1", type=int, default=None)
@click.option("--replications", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--noise", type=click.Choice(["variance", "sd"]), default=None)
@click.option("--spec-sets", default=None, help="comma list from 1,2,3,4")
@click.option("--estimators", "estimator_csv", default=None,
              help=f"comma list from {','.join(ESTIMATOR_NAMES)}")
@click.option("--threads", type=int, default=None)
@click.option("--out-dir", default="dbexp-sim", show_default=True)
def simulate(config_path, defaults, n_units, n_clusters, m1, replications, seed, noise,
             spec_sets, estimator_csv, threads, out_dir):
    """Run the cluster-randomized replication study and write its reports."""

    def body():
        file_config = {}
        if config_path:
            with open(config_path) as fh:
                file_config = json.load(fh)
        if defaults and file_config:
            raise ValueError("--defaults cannot be combined with --config")
        flags = {
            "n_units": n_units,
            "n_clusters": n_clusters,
            "m1": m1,
            "replications": replications,
            "seed": seed,
            "noise_interpretation": noise,
            "spec_sets": None if spec_sets is None else tuple(
                int(v) for v in spec_sets.split(",") if v.strip()
            ),
            "estimators": None if estimator_csv is None else tuple(
                v.strip() for v in estimator_csv.split(",") if v.strip()
            ),
            "threads": threads,
        }
        resolved = dict(file_config)
        for key, value in flags.items():
            if value is not None:
                resolved[key] = value
        if "spec_sets" in resolved:
            resolved["spec_sets"] = tuple(resolved["spec_sets"])
        if "estimators" in resolved:
            resolved["estimators"] = tuple(resolved["estimators"])
        config = SimConfig(**resolved)
        result = run_simulation(config)
        paths = emit_report(result, out_dir)
        write_manifest(out_dir, "simulate", {
            "config_file": file_config,
            "flags": {k: v for k, v in flags.items() if v is not None},
            "resolved": {
                "n_units": config.n_units, "n_clusters": config.n_clusters, "m1": config.m1,
                "replications": config.replications, "seed": config.seed,
                "noise_interpretation": config.noise_interpretation,
                "spec_sets": list(config.spec_sets), "estimators": list(config.estimators),
                "threads": config.threads,
            },
            "calibration_r2": calibration_r2(result.population),
            "failures": int(result.failures.sum()),
        })
        for key, path in paths.items():
            click.echo(f"{key}: {path}")

    _run_guarded(out_dir, body)


@main.command(name="bounds-compare")
@click.option("--design", "descriptor", required=True)
@click.option("--data", "data_path", type=click.Path(), default=None,
              help="experiment CSV (required for cluster designs)")
@click.option("--methods", default="as,iterative", show_default=True,
              help="comma list from as,iterative,cluster")
@click.option("--max-iters", type=int, default=500, show_default=True)
@click.option("--diagnostics", is_flag=True, help="write the iterative min-eigenvalue trace")
@click.option("--out-dir", default="dbexp-bounds", show_default=True)
def bounds_compare(descriptor, data_path, methods, max_iters, diagnostics, out_dir):
    """Construct variance bounds for a design and compare their tightness."""

    def body():
        from .bounds import compare_bounds

        table = read_experiment_csv(data_path) if data_path else None
        design = parse_design_descriptor(descriptor, table)
        dmat = design_matrix(design)
        names = [v.strip() for v in methods.split(",") if v.strip()]
        built = {}
        for name in names:
            if name == "as":
                built[name] = as_bound(dmat)
            elif name == "iterative":
                built[name] = iterative_bound(dmat, max_iters=max_iters)
            elif name == "cluster":
                prov = design.provenance
                if getattr(prov, "kind", None) != "cluster":
                    raise ValueError("the cluster bound needs a cluster design")
                built[name] = cluster_bound(dmat, prov.params["cluster_ids"])
            else:
                raise ValueError(f"unknown bound method {name!r}")
        rows = []
        for a in names:
            for b in names:
                if a >= b and not (len(names) == 1 and a == b):
                    continue
                comparison = compare_bounds(built[a], built[b])
                rows.append([
                    a, b, comparison.verdict, comparison.sharp_null_verdict,
                    comparison.min_eig, comparison.max_eig, comparison.eig_sum,
                ])
        os.makedirs(out_dir, exist_ok=True)
        report = os.path.join(out_dir, "bounds_compare.csv")
        write_csv(
            report,
            ["bound_a", "bound_b", "psd_verdict", "sharpnull_verdict", "min_eig", "max_eig", "eig_sum"],
            rows,
        )
        if diagnostics and "iterative" in built:
            trace_path = os.path.join(out_dir, "iterative_trace.txt")
            with open(trace_path, "w") as fh:
                fh.write("\n".join(repr(v) for v in built["iterative"].min_eig_trace) + "\n")
            click.echo(f"trace: {trace_path}")
        write_manifest(out_dir, "bounds-compare", {
            "design": descriptor, "data": data_path, "methods": names, "max_iters": max_iters,
        })
        click.echo(f"report: {report}")

    _run_guarded(out_dir, body)


@main.command(name="precision-test")
@click.option("--data", "data_path", required=True, type=click.Path())
@click.option("--design", "descriptor", required=True)
@click.option("--coefficient", "coef_path", required=True, type=click.Path(),
              help="fixed coefficient vector (JSON array or one value per line)")
@click.option("--spec", default="II", type=click.Choice(["I", "II"]), show_default=True)
@click.option("--bound", default="as", type=click.Choice(["as", "iterative", "cluster"]),
              show_default=True)
@click.option("--out-dir", default="dbexp-precision", show_default=True)
def precision_cmd(data_path, descriptor, coef_path, spec, bound, out_dir):
    """Test whether a pre-registered fixed adjustment improves precision."""

    def body():
        table = read_experiment_csv(data_path)
        design = parse_design_descriptor(descriptor, table)
        x = zero_center(table.covariates) if table.covariates.size else table.covariates
        layout = spec_common_slopes(x) if spec == "I" else spec_separate_slopes(x)
        b_f = load_numeric_vector(coef_path)
        if b_f.shape[0] != layout.n_columns:
            raise ValueError(
                f"coefficient has {b_f.shape[0]} entries but the layout has {layout.n_columns} columns"
            )
        dmat = design_matrix(design)
        if bound == "as":
            bound_matrix = as_bound(dmat)
        elif bound == "iterative":
            bound_matrix = iterative_bound(dmat)
        else:
            prov = design.provenance
            if getattr(prov, "kind", None) != "cluster":
                raise ValueError("the cluster bound needs a cluster design")
            bound_matrix = cluster_bound(dmat, prov.params["cluster_ids"])
        observed = ObservedOutcomes(table.outcome, AssignmentRealization(table.treatment))
        result = precision_test(design, dmat, observed, layout, b_f, bound_matrix)
        os.makedirs(out_dir, exist_ok=True)
        report = {
            "statistic": result.statistic,
            "threshold": result.threshold,
            "se": result.se,
            "z_score": result.z_score,
            "p_value": result.p_value,
            "degenerate": result.degenerate,
            "se_truncated": result.se_truncated,
            "scaled_statistic": result.scaled_statistic,
            "scaled_threshold": result.scaled_threshold,
            "caveat": (
                "retrospective diagnostic only: the coefficient must be fixed "
                "before outcomes are seen (pre-analysis plan), never chosen after the fact"
            ),
        }
        path = os.path.join(out_dir, "precision_test.json")
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(out_dir, "precision-test", {
            "data": str(data_path), "design": descriptor, "coefficient": str(coef_path),
            "spec": spec, "bound": bound,
        })
        if result.degenerate:
            click.echo("degenerate: zero coefficient, no adjustment tested")
        click.echo(
            f"statistic={result.statistic:.6g} threshold={result.threshold:.6g} "
            f"p={result.p_value:.4g}"
        )
        click.echo(f"report: {path}")

    _run_guarded(out_dir, body)


if __name__ == "__main__":
    main()
