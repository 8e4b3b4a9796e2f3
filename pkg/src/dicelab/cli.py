"""Command-line interface.

Subcommands: gen-data, gradcheck, calibrate, run, report.  Exit codes:
0 success, 1 verification or assertion failure, 2 usage or config error.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from .epsilon import calibrate_epsilon
from .errors import (
    DicelabError,
    EmptyDatasetError,
    InvalidConfigError,
    InvalidParamsError,
    TargetNotFoundError,
)
from .gradcheck import (
    ALL_SCHEMES,
    DEFAULT_EPSILONS,
    DEFAULT_SHAPES,
    format_record,
    run_check_matrix,
)
from .harness import (
    build_dataset,
    default_config,
    load_config,
    run_experiment,
)
from .metrics import format_cell, read_csv, write_csv
from .synthdata import load_dataset, save_dataset
from .tensor import ReductionScheme, Shape, _wrap

_CONFIG_ERRORS = (InvalidConfigError, InvalidParamsError, TargetNotFoundError,
                  EmptyDatasetError, FileNotFoundError)


def _fail(exc: Exception):
    click.echo(f"error: {exc}", err=True)
    sys.exit(2 if isinstance(exc, _CONFIG_ERRORS) else 1)


@click.group()
def main():
    """Dice-loss reduction experiments: data, checks, calibration, runs, reports."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Experiment config; its task/seed/dataset fields are used.")
@click.option("--task", type=click.Choice(["binary", "multiclass"]), default="binary",
              help="Task when no config file is given.")
@click.option("--labeling", type=click.Choice(["full", "partial"]), default="full")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_gen_data(config_path, task, labeling, seed, out_dir):
    """Generate a dataset directory (manifest plus one tensor file per sample)."""
    try:
        config = load_config(config_path) if config_path else default_config(task)
        if seed is not None:
            config = dataclasses.replace(config, seed=seed)
        full, corrupted = build_dataset(config)
        dataset = corrupted if labeling == "partial" else full
        save_dataset(dataset, out_dir)
    except DicelabError as exc:
        _fail(exc)
    click.echo(f"wrote {len(dataset)} samples to {out_dir}")


@main.command("gradcheck")
@click.option("--n", type=click.IntRange(min=1), default=100,
              help="Random instances per scheme/shape/epsilon cell.")
@click.option("--seed", type=int, default=0)
@click.option("--perturb", type=float, default=0.0,
              help="Fault injection: offset added to one analytic gradient element.")
@click.option("--epsilons", default=",".join(DEFAULT_EPSILONS), show_default=True,
              help="Comma list of floats and/or 'calibrated'.")
@click.option("--shapes", default=",".join("x".join(map(str, s)) for s in DEFAULT_SHAPES),
              show_default=True, help="Comma list of BxCxI shapes.")
@click.option("--schemes", default=",".join(s.value for s in ALL_SCHEMES), show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the per-instance report here instead of stdout.")
def cmd_gradcheck(n, seed, perturb, epsilons, shapes, schemes, out_path):
    """Compare analytic gradients against finite differences; exit 0 iff all pass."""
    try:
        shape_list = []
        for token in shapes.split(","):
            dims = tuple(int(d) for d in token.lower().split("x"))
            if len(dims) != 3:
                raise InvalidConfigError(f"bad shape {token!r}, expected BxCxI")
            shape_list.append(dims)
        scheme_list = [ReductionScheme(s.strip()) for s in schemes.split(",")]
        eps_list = [e.strip() for e in epsilons.split(",") if e.strip()]
        for e in eps_list:
            if e != "calibrated":
                float(e)
    except (ValueError, InvalidConfigError) as exc:
        raise click.BadParameter(str(exc))
    records = run_check_matrix(shapes=shape_list, schemes=scheme_list,
                               epsilons=eps_list, n_instances=n,
                               base_seed=seed, perturb=perturb)
    lines = [format_record(r) for r in records]
    failed = sum(1 for r in records
                 if not (r.grad_report.passed and r.two_value_passed))
    lines.append(f"total={len(records)} failed={failed}")
    text = "\n".join(lines) + "\n"
    if out_path:
        Path(out_path).write_text(text)
        click.echo(lines[-1])
    else:
        click.echo(text, nl=False)
    if failed:
        sys.exit(1)


@main.command("calibrate")
@click.option("--dataset", "dataset_dir", type=click.Path(), required=True,
              help="Dataset directory written by gen-data.")
@click.option("--scheme", default="image-wise",
              type=click.Choice([s.value for s in ReductionScheme]))
@click.option("--out", "out_path", type=click.Path(), default=None)
def cmd_calibrate(dataset_dir, scheme, out_path):
    """Heuristic smoothing value (mean foreground per reduction subset)."""
    try:
        ds = load_dataset(dataset_dir)
        n_pixels = ds.image_size ** 2
        maps = [_wrap(Shape(1, ds.n_classes, n_pixels), s.gt.reshape(-1))
                for s in ds.samples]
        cal = calibrate_epsilon(maps, ReductionScheme(scheme))
    except DicelabError as exc:
        _fail(exc)
    payload = {"scheme": scheme, "all_empty": cal.all_empty}
    if cal.per_class is not None:
        payload["per_class"] = {ds.class_names[c]: v for c, v in cal.per_class}
    else:
        payload["global"] = cal.global_value
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).write_text(text)
        click.echo(f"wrote {out_path}")
    else:
        click.echo(text, nl=False)


@main.command("run")
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--jobs", type=click.IntRange(min=1), default=1,
              help="Parallel worker processes for independent matrix cells.")
def cmd_run(config_path, out_dir, seed, jobs):
    """Run the cross-validated experiment matrix and write all artifacts."""
    try:
        config = load_config(config_path)
        if seed is not None:
            config = dataclasses.replace(config, seed=seed)
        artifacts = run_experiment(config, out_dir, jobs=jobs)
    except DicelabError as exc:
        _fail(exc)
    click.echo(f"run complete: {artifacts.out_dir}")
    for p in (artifacts.metrics_csv, artifacts.summary_csv, artifacts.auc_csv,
              artifacts.comparisons_csv):
        click.echo(f"  {p}")


def _aligned(header: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines)


def _round_cell(column: str, value: str) -> str:
    if column.startswith(("mean_", "auc", "p_value")):
        try:
            return f"{float(value):.4f}"
        except ValueError:
            return value
    return value


@main.command("report")
@click.argument("run_dirs", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Also write combined report.csv here.")
def cmd_report(run_dirs, out_dir):
    """Combine one or more run directories into one summary table."""
    combined_header = None
    combined_rows = []
    sections = []
    try:
        for d in run_dirs:
            run = Path(d)
            name = run.name
            header, rows = read_csv(run / "summary.csv")
            auc_header, auc_rows = read_csv(run / "auc.csv")
            if combined_header is None:
                combined_header = ["run"] + header
            combined_rows += [[name] + row for row in rows]
            pretty = [[_round_cell(c, v) for c, v in zip(header, row)] for row in rows]
            sections.append(f"== {name}: summary ==\n" + _aligned(header, pretty))
            pretty = [[_round_cell(c, v) for c, v in zip(auc_header, row)]
                      for row in auc_rows]
            sections.append(f"== {name}: volume-detection AUC ==\n"
                            + _aligned(auc_header, pretty))
            comp_path = run / "comparisons.csv"
            if comp_path.exists():
                comp_header, comp_rows = read_csv(comp_path)
                if comp_rows:
                    pretty = [[_round_cell(c, v) for c, v in zip(comp_header, row)]
                              for row in comp_rows]
                    sections.append(f"== {name}: paired comparisons ==\n"
                                    + _aligned(comp_header, pretty))
    except (OSError, DicelabError) as exc:
        _fail(exc)
    click.echo("\n\n".join(sections))
    if out_dir:
        outp = Path(out_dir)
        outp.mkdir(parents=True, exist_ok=True)
        write_csv(outp / "report.csv", combined_header, combined_rows)
        click.echo(f"\nwrote {outp / 'report.csv'}")


if __name__ == "__main__":
    main()
