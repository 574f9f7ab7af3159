"""
Shared plumbing for the lab's management commands.

    python manage.py <subcommand> --config CONFIG [key=value ...] [options]

Exit status: 0 success, 2 configuration error, 3 runtime failure. Failures
print a single JSON line on stderr.
"""
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand

from .exceptions import ConfigError, HarnessError, OutputCollisionError
from .experiments import HARNESSES, ExperimentSpec
from .forms import load_config
from .models import ExperimentRun

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SUBCOMMANDS = tuple(HARNESSES)
USAGE = (
    'usage: python manage.py {subcommand} --config CONFIG [key=value ...] '
    '[--output DIR] [--seeds 0,1,2] [--force] [--dry-run] [--no-plots] [--workers N]'
)


@dataclass
class CliInvocation:
    subcommand: str
    config: str | None = None
    overrides: tuple = ()
    output: str | None = None
    seeds: str | None = None
    force: bool = False
    dry_run: bool = False
    plots: bool = True
    workers: int = 1


def parse_seeds(text):
    try:
        seeds = tuple(int(part) for part in text.split(',') if part.strip())
    except ValueError:
        raise ConfigError(f'Seeds must be comma-separated integers, got {text!r}.', key='seeds')
    if not seeds or any(seed < 0 for seed in seeds) or len(set(seeds)) != len(seeds):
        raise ConfigError('Seeds must be distinct non-negative integers.', key='seeds')
    return seeds


def default_output_dir(subcommand):
    return Path(settings.OCCLAB_OUTDIR) / subcommand


def prepare_output_dir(path, force=False):
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise OutputCollisionError(f'Output path {path} exists and is not a directory.', key='output')
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputCollisionError(
            f'Output directory {path} is not empty; pass --force to write into it.', key='output'
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def _error_line(kind, message, key=None):
    return json.dumps({'error': kind, 'key': key, 'message': message}, sort_keys=True)


def _report(result, stdout, style):
    success = style.SUCCESS if style else str
    occupancy = result.tables.get('occupancy')
    if occupancy is not None:
        stdout.write(occupancy.to_frame().to_string(index=False) + '\n')
    comparison = result.tables.get('comparison')
    if comparison is not None:
        stdout.write(comparison.to_string(index=False) + '\n')
    stdout.write(json.dumps(result.summary.get('claims', {}), indent=2, sort_keys=True) + '\n')
    stdout.write(success(f'{result.experiment}: {len(result.records)} metric rows') + '\n')
    for path in result.artifacts:
        stdout.write(f'  {path}\n')


def _run(invocation, stdout, style):
    if invocation.subcommand not in HARNESSES:
        raise ConfigError(f'Unknown subcommand {invocation.subcommand!r}; expected one of {SUBCOMMANDS}.',
                          key='subcommand')
    if not invocation.config:
        raise ConfigError(USAGE.format(subcommand=invocation.subcommand), key='config')

    config = load_config(invocation.config, invocation.overrides)
    seeds = parse_seeds(invocation.seeds) if invocation.seeds else tuple(config['seeds'])
    config['seeds'] = list(seeds)
    output_dir = Path(invocation.output) if invocation.output else default_output_dir(invocation.subcommand)
    spec = ExperimentSpec.from_config(config, output_dir, seeds, invocation.plots, invocation.workers)

    if invocation.dry_run:
        plan = {'plan': spec.plan(invocation.subcommand), 'config': config}
        stdout.write(json.dumps(plan, indent=2, sort_keys=True) + '\n')
        return EXIT_OK

    prepare_output_dir(output_dir, invocation.force)
    (output_dir / 'resolved_config.json').write_text(json.dumps(config, indent=2, sort_keys=True) + '\n')
    run = ExperimentRun.objects.create(
        subcommand=invocation.subcommand,
        experiment=config['experiment'],
        output_dir=str(output_dir),
        config=config,
        seeds=list(seeds),
    )
    logger.info('Run %s: %s -> %s', run.pk, invocation.subcommand, output_dir)
    try:
        result = HARNESSES[invocation.subcommand](spec)
        run.record_metrics(result.records)
    except ConfigError as exc:
        run.finish(ExperimentRun.FAILED, str(exc))
        raise
    except Exception as exc:
        error = HarnessError(exc)
        run.finish(ExperimentRun.FAILED, str(error))
        raise error from exc
    run.finish(ExperimentRun.SUCCEEDED)
    _report(result, stdout, style)
    return EXIT_OK


def dispatch(invocation, stdout=sys.stdout, stderr=sys.stderr, style=None):
    """Run one invocation and return its exit status."""
    try:
        return _run(invocation, stdout, style)
    except ConfigError as exc:
        stderr.write(exc.as_line() + '\n')
        return EXIT_CONFIG
    except ValidationError as exc:
        stderr.write(_error_line('config', '; '.join(exc.messages)) + '\n')
        return EXIT_CONFIG
    except HarnessError as exc:
        logger.exception('%s failed', invocation.subcommand)
        stderr.write(_error_line('runtime', str(exc)) + '\n')
        return EXIT_RUNTIME
    except Exception as exc:
        logger.exception('%s failed', invocation.subcommand)
        stderr.write(_error_line('runtime', f'{type(exc).__name__}: {exc}') + '\n')
        return EXIT_RUNTIME


class LabCommand(BaseCommand):
    subcommand = None

    def add_arguments(self, parser):
        parser.add_argument(
            'overrides',
            nargs='*',
            metavar='key=value',
            help='Dotted config overrides, e.g. gamma=0.5 estimator.batch_size=32'
        )
        parser.add_argument(
            '--config',
            help='JSON config file (looked up in OCCLAB_CONFIG_DIR when not found as given)'
        )
        parser.add_argument(
            '--output',
            help='Output directory (default: $OCCLAB_OUTDIR/<subcommand>)'
        )
        parser.add_argument(
            '--seeds',
            help='Comma-separated seed list overriding the config, e.g. 0,1,2'
        )
        parser.add_argument(
            '--force',
            action='store_true',
            help='Write into a non-empty output directory'
        )
        parser.add_argument(
            '--dry-run',
            action='store_true',
            help='Print the resolved plan without computing anything'
        )
        parser.add_argument(
            '--no-plots',
            action='store_true',
            help='Skip SVG plots'
        )
        parser.add_argument(
            '--workers',
            type=int,
            default=1,
            help='Worker processes for independent jobs (default: 1)'
        )

    def handle(self, *args, **options):
        invocation = CliInvocation(
            subcommand=self.subcommand,
            config=options['config'],
            overrides=tuple(options['overrides']),
            output=options['output'],
            seeds=options['seeds'],
            force=options['force'],
            dry_run=options['dry_run'],
            plots=not options['no_plots'],
            workers=options['workers'],
        )
        status = dispatch(invocation, self.stdout, self.stderr, self.style)
        if status != EXIT_OK:
            sys.exit(status)
