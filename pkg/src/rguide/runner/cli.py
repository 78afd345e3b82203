"""Command line interface: ``rguide sample|sweep|compare|validate|presets|replot``.

Exit codes: 0 success, 1 invalid config or usage, 2 runtime or numerical failure
(including partially failed batches, which still write a bundle).
"""

from __future__ import annotations

import logging
import os
import sys

import click

from .. import __version__
from ..errors import ConfigError, RGuideError
from . import bundle as bmod
from . import config as cfgmod
from . import presets as pmod

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("rguide")


def _overrides(sets, seed, plots, jobs):
    out = list(sets)
    if seed is not None:
        out.append(f"seed={seed}")
    if plots is not None:
        out.append(f"emit_plots={'true' if plots else 'false'}")
    if jobs is not None:
        out.append(f"jobs={jobs}")
    return out


def _load(config, preset, overrides):
    if config and preset:
        raise click.UsageError("give either a preset name or --config, not both")
    if config:
        return cfgmod.load_file(config, overrides), os.path.splitext(os.path.basename(config))[0]
    if preset:
        return pmod.load_preset(preset, overrides), preset
    raise click.UsageError("a config file (--config) or a preset name is required")


def _out_dir(out, resolved, command, name):
    if out:
        return out
    if resolved["output_dir"]:
        return resolved["output_dir"]
    root = os.environ.get("RGUIDE_OUT", "rguide-out")
    return os.path.join(root, f"{command}-{name}")


def _finish(result):
    click.echo(f"bundle: {result.out_dir}")
    if result.calibration:
        for rule, param, scale, energy, target, evals in result.calibration:
            click.echo(f"calibrated {rule}: {param}={scale:.6g} (energy {energy:.6g}, target {target:.6g}, "
                       f"{evals} evaluations)")
    if result.report is not None:
        for name in result.report.rule_names:
            agg = result.report.aggregates[name]
            parts = [f"{k}={agg[k][0]:.6g}" for k in ("max_manifold_distance", "final_conditional_energy",
                                                      "energy_auc") if agg[k][0] is not None]
            click.echo(f"{name}: " + " ".join(parts))
    if not result.ok:
        click.echo(f"{len(result.failures)} trajectories failed; partial bundle written", err=True)
        for f in result.failures[:10]:
            click.echo(f"  {f}", err=True)
        raise SystemExit(EXIT_RUNTIME)


def _common(fn):
    fn = click.option("--jobs", type=click.IntRange(min=1), default=None, help="Worker processes for batches.")(fn)
    fn = click.option("--plots/--no-plots", default=None, help="Emit SVG plots (default from config).")(fn)
    fn = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                      help="Override a config value, e.g. rules.mog.beta=2 (repeatable).")(fn)
    fn = click.option("--seed", type=click.IntRange(min=0), default=None, help="Base seed.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None, help="Bundle directory.")(fn)
    fn = click.option("--config", type=click.Path(dir_okay=False), default=None, help="YAML config file.")(fn)
    return fn


@click.group()
@click.version_option(__version__, prog_name="rguide")
@click.option("-v", "--verbose", is_flag=True, help="Log warnings and progress to stderr.")
def cli(verbose):
    """Metric-preconditioned guidance experiments on synthetic oracles."""
    logging.basicConfig(level=logging.INFO if verbose else logging.ERROR, format="%(levelname)s %(message)s")


@cli.command()
@click.argument("preset", required=False)
@_common
def sample(preset, config, out, seed, sets, plots, jobs):
    """Run every configured rule on a batch and write a bundle."""
    resolved, name = _load(config, preset, _overrides(sets, seed, plots, jobs))
    _finish(bmod.run_sample(resolved, _out_dir(out, resolved, "sample", name)))


@cli.command()
@click.argument("preset", required=False)
@_common
@click.option("--param", default=None, help=f"Sweep parameter ({', '.join(cfgmod.SWEEPABLE)}).")
@click.option("--values", default=None, help="Comma separated values, e.g. 1,5,10.")
def sweep(preset, config, out, seed, sets, plots, jobs, param, values):
    """Repeat the paired run over values of one parameter."""
    ov = _overrides(sets, seed, plots, jobs)
    if param is not None:
        ov.append(f"sweep.parameter={param}")
    if values is not None:
        ov.append(f"sweep.values=[{values}]")
    resolved, name = _load(config, preset, ov)
    _finish(bmod.run_sweep(resolved, _out_dir(out, resolved, "sweep", name)))


@cli.command()
@click.argument("preset", required=False)
@_common
def compare(preset, config, out, seed, sets, plots, jobs):
    """Paired comparison of rules, calibrated when the config asks for it."""
    if preset is not None and preset not in pmod.COMPARE_PRESETS:
        raise ConfigError(f"unknown compare preset {preset!r}; available: {', '.join(pmod.COMPARE_PRESETS)}")
    resolved, name = _load(config, preset, _overrides(sets, seed, plots, jobs))
    _finish(bmod.run_compare(resolved, _out_dir(out, resolved, "compare", name)))


@cli.command()
@click.argument("preset", required=False)
@click.option("--config", type=click.Path(dir_okay=False), default=None)
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE")
@click.option("--quiet", is_flag=True, help="Only report validity.")
def validate(preset, config, sets, quiet):
    """Check a config and print it with every default filled in."""
    resolved, _ = _load(config, preset, list(sets))
    if not quiet:
        click.echo(cfgmod.dump(resolved), nl=False)
    click.echo("config ok", err=True)


@cli.command()
@click.option("--show", default=None, metavar="NAME", help="Print the YAML of one preset.")
def presets(show):
    """List bundled presets."""
    if show:
        click.echo(pmod.preset_text(show), nl=False)
        return
    for name in pmod.PRESETS:
        click.echo(name)


@cli.command()
@click.argument("bundle", type=click.Path(exists=True, file_okay=False))
def replot(bundle):
    """Regenerate SVG plots of a bundle from its series.csv files."""
    for path in bmod.replot(bundle):
        click.echo(path)


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="rguide", standalone_mode=False)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_RUNTIME
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except RGuideError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
