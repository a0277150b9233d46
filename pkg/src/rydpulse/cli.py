"""Command-line entry point: ``rydpulse run|validate|eta|grape``."""

from __future__ import annotations

import csv
import json
import logging
import sys
from dataclasses import asdict, replace

import click

from .blockade import EtaModel, characteristic_distance, eta_grid
from .config import SEED_ENV, ConfigError, ExperimentConfig
from .evolution import DELTA_MAX, OMEGA_MAX
from .grape import GrapeConfig
from .hamiltonian import DEFAULT_C6
from .statistics import Bipartition, classify_bipartition, find_asymmetric_bipartition


def _load(config_path, overrides, seed=None):
    extra = list(overrides)
    if seed is not None:
        extra.append(f"seed={seed}")
    try:
        return ExperimentConfig.load(config_path, extra)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from None


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
@click.version_option(package_name="artifact", prog_name="rydpulse")
def main(verbose):
    """Random-pulse ensembles and optimal control on Rydberg rings."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override any config leaf, e.g. --set physics.spacings=[5,10].")
@click.option("--seed", type=int, default=None, help=f"Master seed (beats {SEED_ENV} and the file).")
@click.option("--workers", type=click.IntRange(min=1), default=None)
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None)
@click.option("--resume", is_flag=True, help="Skip records already present in the output directory.")
def run(config_path, overrides, seed, workers, output_dir, resume):
    """Execute the experiment described by CONFIG_PATH."""
    from .runner import run as run_experiment

    cfg = _load(config_path, overrides, seed)
    for w in cfg.warnings:
        click.echo(f"warning: {w}", err=True)
    try:
        manifest = run_experiment(cfg, resume=resume, workers=workers, output_dir=output_dir)
    except (ValueError, RuntimeError) as exc:
        raise click.ClickException(str(exc)) from None
    click.echo(str(manifest))


def _d_tilde(d):
    try:
        return characteristic_distance(d["physics"]["c6"], d["pulses"]["omega_max"], d["pulses"]["delta_max"])
    except ValueError:
        return None


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
def validate(config_path, overrides):
    """Check a config and print it with every default resolved."""
    cfg = _load(config_path, overrides)
    d = cfg.data
    n = d["physics"]["n_atoms"]
    mask = d["analysis"]["bipartition"]
    try:
        part = Bipartition(n, tuple(mask)) if mask is not None else find_asymmetric_bipartition(n)
        label = classify_bipartition(part).label
        mask_info = {"sites": list(part.sites), "mask": part.mask, "symmetry": label}
    except ValueError as exc:
        mask_info = {"error": str(exc)}
    g = d["grape"]
    report = {
        "config": cfg.resolved(),
        "config_hash": cfg.hash,
        "resolved": {
            "c6": d["physics"]["c6"],
            "alpha": g["alpha"],
            "a1": g["a1"],
            "a2": g["a2"],
            "a3": g["a3"],
            "bipartition": mask_info,
            "d_tilde_um": _d_tilde(d),
        },
        "warnings": cfg.warnings,
    }
    click.echo(json.dumps(report, indent=2))
    for w in cfg.warnings:
        click.echo(f"warning: {w}", err=True)


@main.command()
@click.option("--d", "spacings", type=float, multiple=True, required=True, help="Spacing in um (repeatable).")
@click.option("--c6", type=float, default=DEFAULT_C6, show_default=True)
@click.option("--omega-max", type=float, default=OMEGA_MAX, show_default=True)
@click.option("--delta-max", type=float, default=DELTA_MAX, show_default=True)
@click.option("--eta-max", type=float, default=3.0, show_default=True)
@click.option("--points", type=click.IntRange(min=2), default=601, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False, writable=True), default=None,
              help="Write CSV here instead of stdout.")
def eta(spacings, c6, omega_max, delta_max, eta_max, points, out_path):
    """Analytic density and CDF of the drive-detuning ratio as CSV."""
    rows = []
    for d in spacings:
        if d <= 0:
            raise click.BadParameter(f"spacing must be positive, got {d}", param_hint="--d")
        model = EtaModel.at_distance(d, c6, omega_max, delta_max)
        for x, p, c in zip(*eta_grid(model, eta_max, points)):
            rows.append((d, repr(float(x)), repr(float(p)), repr(float(c))))
    handle = open(out_path, "w", newline="") if out_path else sys.stdout
    try:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["spacing_um", "eta", "pdf", "cdf"])
        writer.writerows(rows)
    finally:
        if out_path:
            handle.close()


@main.command()
@click.option("--target", "target_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="State file (sector or full amplitudes).")
@click.option("--d", "spacing", type=float, default=10.0, show_default=True)
@click.option("--c6", type=float, default=DEFAULT_C6, show_default=True)
@click.option("--t-max", type=float, default=6.0, show_default=True)
@click.option("--restarts", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--max-iters", type=click.IntRange(min=1), default=None)
@click.option("--optimizer", type=click.Choice(["lbfgs", "gd"]), default="lbfgs", show_default=True)
@click.option("--a1", type=float, default=None)
@click.option("--seed", type=int, default=None, help=f"Defaults to {SEED_ENV} or 0.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
def grape(target_path, spacing, c6, t_max, restarts, max_iters, optimizer, a1, seed, out_path):
    """Optimise a pulse that prepares the state in TARGET from the ground state."""
    import os

    from .runner import grape_single

    if seed is None:
        raw = os.environ.get(SEED_ENV) or "0"
        try:
            seed = int(raw)
        except ValueError:
            raise click.ClickException(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    if spacing <= 0:
        raise click.BadParameter("spacing must be positive", param_hint="--d")
    config = GrapeConfig(t_max=t_max, n_restarts=restarts, optimizer=optimizer)
    if max_iters is not None:
        config = replace(config, max_iters=max_iters)
    if a1 is not None:
        config = replace(config, a1=a1)
    try:
        doc = grape_single(target_path, spacing, c6, config, seed)
    except (ValueError, RuntimeError) as exc:
        raise click.ClickException(str(exc)) from None
    doc["config"] = asdict(config)
    text = json.dumps(doc, indent=2)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
        click.echo(f"best infidelity {doc['best_infidelity']:.3e} (T = {doc['t_opt']:.3f} us) -> {out_path}")
    else:
        click.echo(text)


if __name__ == "__main__":
    main()
