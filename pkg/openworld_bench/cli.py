import functools
import json
import logging
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import click
from tqdm import tqdm

from openworld_bench.checkpoint import load_classifier, save_checkpoint
from openworld_bench.config import ConfigError, ExperimentConfig, load_config
from openworld_bench.datasets import SHAPE_FAMILY, gen_gaussian_noise_ood, gen_synthetic_shapes, save_pgm_folder
from openworld_bench.downloader import fetch_mnist
from openworld_bench.experiment import (ExperimentError, build_base_model, build_defended_model, prepare_data,
                                        run_experiment, slug)
from openworld_bench.models import evaluate_model
from openworld_bench.report import EvalReport, ReportError, load_report_json, replay_success_rate
from openworld_bench.utils import BenchError, setup_logging

logger = logging.getLogger(__name__)


class ValidationFailure(click.ClickException):
    """Configuration or argument problem; exit code 1."""
    exit_code = 1

    def show(self, file=None) -> None:
        click.echo(f"❌ {self.format_message()}", err=True)


class RuntimeFailure(click.ClickException):
    """A stage failed while running; exit code 2."""
    exit_code = 2

    def show(self, file=None) -> None:
        click.echo(f"❌ Error: {self.format_message()}", err=True)


def _usage_exit_code(error: click.UsageError) -> click.UsageError:
    error.exit_code = 1
    return error


class BenchCommand(click.Command):
    """Command whose usage errors exit with code 1."""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            raise _usage_exit_code(e)


class BenchGroup(click.Group):
    command_class = BenchCommand

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            raise _usage_exit_code(e)

    def resolve_command(self, ctx, args):
        try:
            return super().resolve_command(ctx, args)
        except click.UsageError as e:
            raise _usage_exit_code(e)


class CliState:
    def __init__(self, config_path: Optional[str], seed: Optional[int], out: Optional[str]):
        self.config_path = config_path
        self.seed = seed
        self.out = out

    def config(self) -> ExperimentConfig:
        if not self.config_path:
            raise ValidationFailure("This command needs an experiment file: pass --config <path>")
        return load_config(self.config_path, seed=self.seed, output_dir=self.out)


def handle_errors(func: Callable) -> Callable:
    """Map bench exceptions onto exit codes: 1 for configuration, 2 for runtime failures."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except click.ClickException:
            raise
        except ConfigError as e:
            raise ValidationFailure(str(e))
        except ExperimentError as e:
            click.echo(f"⚠️  Partial report kept with {len(e.partial_report.rows)} rows", err=True)
            raise RuntimeFailure(str(e))
        except BenchError as e:
            raise RuntimeFailure(str(e))
        except Exception as e:
            logger.debug("Unexpected failure", exc_info=True)
            raise RuntimeFailure(f"{type(e).__name__}: {e}")
    return wrapper


class TqdmProgress:
    """Progress callback that drives a tqdm bar with the latest status message."""

    def __init__(self, desc: str):
        self.bar = tqdm(desc=desc, unit='step', leave=False)

    def __call__(self, message: str) -> None:
        self.bar.set_postfix_str(message[:60])
        self.bar.update(1)

    def close(self) -> None:
        self.bar.close()


def _summary(report: EvalReport, output_dir: Path) -> None:
    click.echo('═' * 60)
    click.echo('📊 EVALUATION SUMMARY')
    click.echo('═' * 60)
    for row in report.sorted_rows():
        parts = [f"{row.model} | {row.data_source} | {row.data_kind} | {row.attack} | {row.defense}"]
        for column, unit in (('accuracy', '%'), ('tsr', '%'), ('mean_conf', ''), ('det_rate', '%'),
                             ('fpr', '%'), ('queries', '')):
            value = getattr(row, column)
            if value is not None:
                parts.append(f"{column}={value:.2f}{unit}" if unit else f"{column}={value:.4g}")
        click.echo('  ' + '  '.join(parts))
    click.echo(f'📁 Output location: {output_dir.absolute()}')


def _run_stages(state: CliState, stages: Sequence[str], title: str) -> None:
    cfg = state.config()
    output_dir = Path(cfg.experiment.output_path)
    click.echo(f'🚀 {title}: {cfg.experiment.name} (seed {cfg.experiment.seed})')
    click.echo(f'📁 Output directory: {output_dir.absolute()}')
    click.echo(f'⚡ Workers: {cfg.experiment.workers}')
    click.echo('─' * 60)
    progress = TqdmProgress(title)
    try:
        report = run_experiment(cfg, stages, progress)
    finally:
        progress.close()
    _summary(report, output_dir)
    click.echo(f'✅ {len(report.rows)} report rows written')


@click.group(cls=BenchGroup)
@click.option('--config', '-c', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Experiment YAML file.')
@click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=None,
              help='Override the experiment seed.')
@click.option('--out', type=click.Path(file_okay=False), default=None,
              help='Override the output directory.')
@click.option('--verbose', '-v', count=True, help='-v for progress logs, -vv for debug logs.')
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], seed: Optional[int], out: Optional[str],
        verbose: int) -> None:
    """
    Open-world evasion bench.

    Train classifiers, attack in-distribution and out-of-distribution inputs,
    and evaluate OOD and adversarial-example detectors.
    """
    setup_logging(verbose)
    ctx.obj = CliState(config_path, seed, out)


@cli.command('train')
@click.pass_obj
@handle_errors
def train(state: CliState) -> None:
    """Train (or load) the configured classifier and report clean accuracy."""
    cfg = state.config()
    output_dir = Path(cfg.experiment.output_path)
    click.echo(f'🧠 Training model {cfg.model.label}')
    click.echo('─' * 60)
    data = prepare_data(cfg)
    progress = TqdmProgress('train')
    try:
        entry = build_base_model(cfg, data, progress)
    finally:
        progress.close()
    path = save_checkpoint(output_dir / 'models' / f"{slug(entry.label)}.npz", entry.model)
    evaluation = evaluate_model(entry.model, data.test)
    click.echo(f'✅ Test accuracy: {evaluation.accuracy:.2f}% (mean confidence {evaluation.mean_confidence:.4f})')
    click.echo(f'📄 Checkpoint saved to {path}')


@cli.command('robust-train')
@click.option('--defense', '-d', 'defense_names', multiple=True,
              help='Defense name from the config (repeatable); all defenses when omitted.')
@click.pass_obj
@handle_errors
def robust_train(state: CliState, defense_names: Tuple[str, ...]) -> None:
    """Train the defended twins listed in the config's defenses section."""
    cfg = state.config()
    known = {d.name: d for d in cfg.defenses}
    unknown = [n for n in defense_names if n not in known]
    if unknown:
        raise ValidationFailure(f"Unknown defenses {unknown}. Available: {sorted(known)}")
    selected = [known[n] for n in defense_names] if defense_names else list(cfg.defenses)
    if not selected:
        raise ValidationFailure("The config defines no defenses")
    output_dir = Path(cfg.experiment.output_path)
    data = prepare_data(cfg)
    for defense in selected:
        click.echo(f'🛡️  Training defense {defense.name} ({defense.kind})')
        progress = TqdmProgress(defense.name)
        try:
            entry = build_defended_model(cfg, defense, cfg.model.label, data, progress)
        finally:
            progress.close()
        path = save_checkpoint(output_dir / 'models' / f"{slug(entry.label)}.npz", entry.model)
        evaluation = evaluate_model(entry.model, data.test)
        click.echo(f'    ✅ {entry.label}: test accuracy {evaluation.accuracy:.2f}%')
        click.echo(f'    📄 Checkpoint saved to {path}')


@cli.command('attack')
@click.pass_obj
@handle_errors
def attack(state: CliState) -> None:
    """Run the configured attacks on in-distribution and OOD starts."""
    _run_stages(state, ('clean', 'attacks'), 'Attack run')


@cli.command('detect')
@click.pass_obj
@handle_errors
def detect(state: CliState) -> None:
    """Calibrate the configured detectors and score unmodified data."""
    _run_stages(state, ('clean', 'detectors'), 'Detector run')


@cli.command('eval')
@click.pass_obj
@handle_errors
def evaluate(state: CliState) -> None:
    """Run the full evaluation matrix and write the report."""
    _run_stages(state, ('clean', 'attacks', 'detectors'), 'Evaluation')


def _replay(run_dir: Path, manifest: dict, report: EvalReport) -> List[Tuple[str, float, Optional[float]]]:
    checkpoints = {m['label']: m['checkpoint'] for m in manifest.get('models', [])}
    outcomes = []
    for artifact in manifest.get('artifacts', []):
        if artifact.get('type') != 'adversarial' or artifact.get('defense') != 'none':
            continue
        checkpoint = checkpoints.get(artifact['model'])
        if not checkpoint:
            continue
        model = load_classifier(checkpoint)
        replayed = replay_success_rate(model, run_dir / artifact['path'])
        rows = report.find(model=artifact['model'], data_source=artifact['data_source'],
                           data_kind=artifact['data_kind'], attack=artifact['attack'], defense='none')
        stored = None
        if rows:
            stored = rows[0].extras.get('fixed_tsr', rows[0].tsr)
        outcomes.append((artifact['path'], replayed, stored))
    return outcomes


@cli.command('report')
@click.argument('run_dir', type=click.Path(exists=True, file_okay=False))
@click.option('--replay', is_flag=True, default=False,
              help='Recompute success rates from stored adversarial examples.')
@handle_errors
def report(run_dir: str, replay: bool) -> None:
    """Summarise a finished run directory."""
    path = Path(run_dir)
    loaded = load_report_json(path / 'report.json')
    if loaded.partial:
        click.echo('⚠️  This report is partial: a stage failed before completion')
    _summary(loaded, path)
    if not replay:
        return
    try:
        manifest = json.loads((path / 'manifest.json').read_text(encoding='utf-8'))
    except (OSError, ValueError) as e:
        raise ReportError(f"Cannot read manifest in {path}: {e}") from e
    click.echo('─' * 60)
    click.echo('🔍 Replaying stored adversarial examples')
    mismatches = 0
    for name, replayed, stored in _replay(path, manifest, loaded):
        same = stored is not None and abs(replayed - stored) < 1e-9
        mismatches += 0 if same else 1
        click.echo(f"  {'✅' if same else '❌'} {name}: replayed {replayed:.4f}, reported {stored}")
    if mismatches:
        raise RuntimeFailure(f"{mismatches} artifacts do not reproduce their reported success rate")
    click.echo('✅ Every stored success rate reproduces')


@cli.command('fetch-mnist')
@click.argument('dest', type=click.Path(file_okay=False))
@click.option('--mirror', type=str, default=None, help='Base URL of an MNIST mirror.')
@click.option('--retries', type=click.IntRange(0, 10), default=3, help='Retries per file.')
@handle_errors
def fetch_mnist_command(dest: str, mirror: Optional[str], retries: int) -> None:
    """Download the four MNIST IDX archives."""
    click.echo(f'🔽 Downloading MNIST into {Path(dest).absolute()}')
    paths = fetch_mnist(Path(dest), mirror=mirror, max_retries=retries, progress_callback=click.echo)
    click.echo(f'✅ {len(paths)} files ready')


@cli.command('gen-ood')
@click.argument('dest', type=click.Path(file_okay=False))
@click.option('--kind', '-k', type=click.Choice(['gaussian', 'shapes']), default='gaussian',
              help='Generator to use.')
@click.option('--count', '-n', type=click.IntRange(1), default=1000, help='Number of images.')
@click.option('--classes', type=str, default='rings,boxes',
              help=f"Comma-separated shape classes for --kind shapes ({', '.join(SHAPE_FAMILY)}).")
@click.option('--height', type=click.IntRange(1), default=28)
@click.option('--width', type=click.IntRange(1), default=28)
@click.option('--mean', type=float, default=127.0, help='Gaussian mean on the [0, 255] scale.')
@click.option('--stddev', type=click.FloatRange(0, min_open=True), default=50.0,
              help='Gaussian standard deviation on the [0, 255] scale.')
@click.option('--gen-seed', type=click.IntRange(0), default=0, help='Generator seed.')
@handle_errors
def gen_ood(dest: str, kind: str, count: int, classes: str, height: int, width: int, mean: float,
            stddev: float, gen_seed: int) -> None:
    """Write a synthetic OOD set as a folder of PGM images."""
    shape = (1, height, width)
    if kind == 'gaussian':
        data = gen_gaussian_noise_ood(count, shape, mean, stddev, gen_seed)
    else:
        names = [c.strip() for c in classes.split(',') if c.strip()]
        data = gen_synthetic_shapes(count, shape, names, gen_seed).as_unlabeled()
    paths = save_pgm_folder(Path(dest), data, prefix=kind)
    click.echo(f'✅ Wrote {len(paths)} {kind} images to {Path(dest).absolute()}')


if __name__ == '__main__':  # pragma: no cover
    cli()
