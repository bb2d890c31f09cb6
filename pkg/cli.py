"""
Command-line entry point.

    python cli.py --config configs/run.json --out levels.csv levels

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Command output goes to --out (written atomically) or stdout; logs
and human-readable tables go to stderr.
"""

import logging
from dataclasses import dataclass
from functools import wraps
from typing import Optional

import click

import commands
import data_io
import report_utils
from errors import ConfigError, SpectroscopyError

logger = logging.getLogger(__name__)


@dataclass
class Options:
    config_path: Optional[str]
    seed: Optional[int]
    out: Optional[str]
    threads: Optional[int]

    def load(self) -> data_io.RunConfig:
        if not self.config_path:
            raise ConfigError("this command needs --config PATH")
        return data_io.load_run_config(self.config_path, seed=self.seed, threads=self.threads)


def handle_errors(f):
    """Decorator mapping package errors to their exit codes"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except SpectroscopyError as e:
            logger.debug("command failed", exc_info=True)
            click.echo(f"error: {e}", err=True)
            click.get_current_context().exit(e.exit_code)
    return decorated_function


def emit(options: Options, text: str) -> None:
    if options.out:
        data_io.write_atomic(options.out, text)
        logger.info("wrote %s", options.out)
    else:
        click.echo(text, nl=False)


@click.group()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='Run configuration (JSON).')
@click.option('--seed', type=click.IntRange(min=0), help='Override the configured seed.')
@click.option('--out', type=click.Path(dir_okay=False, writable=True), help='Output file, default stdout.')
@click.option('--threads', type=click.IntRange(min=1), help='Worker threads for parallel steps.')
@click.option('-v', '--verbose', count=True, help='-v for info, -vv for debug logging.')
@click.pass_context
def cli(ctx, config_path, seed, out, threads, verbose):
    """Zero-field hyperfine spectroscopy and cavity transmission simulator."""
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s', force=True)
    ctx.obj = Options(config_path, seed, out, threads)


def _simple_command(name: str, help_text: str):
    @cli.command(name=name, help=help_text)
    @click.pass_obj
    @handle_errors
    def command(options: Options):
        result = commands.run_command(name, options.load())
        emit(options, result.to_text())
    return command


_simple_command('levels', 'Energies of every site (zero field unless static_field_tesla is set).')
_simple_command('transitions', 'Stick spectrum: frequency and collective coupling of every transition.')
_simple_command('sweep', 'Peak transmission and Q while stepping the cavity frequency.')
_simple_command('saturation', 'Peak transmission and Q versus input power.')
_simple_command('lineshape', 'Inhomogeneous line profile from random local fields.')


@cli.command()
@click.option('--pdf', 'pdf_path', type=click.Path(dir_okay=False, writable=True), help='Also render a PDF report.')
@click.pass_obj
@handle_errors
def fit(options: Options, pdf_path):
    """Refine A and Q against observed zero-field lines."""
    result = commands.run_command('fit', options.load())
    emit(options, result.to_text())
    click.echo(report_utils.format_fit_report(result.report, result.header, result.rows), err=True, nl=False)
    if pdf_path:
        data_io.write_atomic(pdf_path, report_utils.render_fit_pdf(result.report, result.header, result.rows))


@cli.command()
@click.pass_obj
@handle_errors
def budget(options: Options):
    """Photon number, population difference, couplings, Rabi frequency, cooperativity."""
    result = commands.run_command('budget', options.load())
    emit(options, result.to_text())
    click.echo(report_utils.format_result_table('link budget', result.header, result.rows, result.metadata),
               err=True, nl=False)


@cli.command()
@click.argument('path', type=click.Path(dir_okay=False))
@click.pass_obj
@handle_errors
def ingest(options: Options, path):
    """Resonance frequency, peak and Q of a measured sweep CSV."""
    emit(options, commands.ingest_file(path).to_text())


@cli.command()
@click.option('--host', default='127.0.0.1', show_default=True)
@click.option('--port', default=5000, show_default=True, type=int)
def serve(host, port):
    """Serve the JSON API."""
    from app import app
    app.run(host=host, port=port, debug=False)


if __name__ == '__main__':
    cli()
