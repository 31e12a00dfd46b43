import os
import sys
import logging

# DON'T CHANGE THIS !!!
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

import click
from pydantic import ValidationError

from src.config import Config
from src.models.scenario import RunConfig
from src.simulator import EXIT_CONFIG, Simulator

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging():
    """Console logging plus the run log file unless PQKD_LOG_FILE is empty"""
    handlers = [logging.StreamHandler()]
    if Config.LOG_FILE:
        handlers.insert(0, logging.FileHandler(Config.LOG_FILE))
    logging.basicConfig(level=Config.log_level(), format=LOG_FORMAT, handlers=handlers, force=True)


@click.group()
def cli():
    """Polarization-stabilized one-way QKD simulator"""


@cli.command()
@click.option('--scenario', default='fiber50', show_default=True,
              help='Preset name (fiber50, fiber75, fiber100) or path to a key=value file')
@click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=1, show_default=True,
              help='64-bit unsigned seed')
@click.option('--duration', 'duration_s', type=float, default=3600.0, show_default=True,
              help='Key distribution time to simulate, in seconds')
@click.option('--mode', type=click.Choice(['single', 'alice', 'bob']), default='single', show_default=True)
@click.option('--peer', 'peer_address', default=None, help='host:port of the other station (alice/bob modes)')
@click.option('--out', 'output_dir', default=None, help=f'Output directory (default: {Config.OUTPUT_DIR})')
@click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
              help='Override one scenario key; repeatable')
def simulate(scenario, seed, duration_s, mode, peer_address, output_dir, overrides):
    """Run one simulated session and write trace.csv, qber.csv and summary.json"""
    configure_logging()

    validation = Config.validate_config()
    if not validation['valid']:
        logger.error("Configuration validation failed:")
        for error in validation['errors']:
            logger.error(f"  - {error}")
        sys.exit(EXIT_CONFIG)
    for warning in validation['warnings']:
        logger.warning(f"  - {warning}")

    try:
        cfg = RunConfig(
            scenario=scenario,
            seed=seed,
            duration_s=duration_s,
            mode=mode,
            peer_address=peer_address,
            output_dir=output_dir or Config.OUTPUT_DIR,
            overrides=tuple(overrides),
        )
    except ValidationError as e:
        logger.error(f"Invalid run configuration: {e}")
        sys.exit(EXIT_CONFIG)

    result = Simulator().run(cfg)
    if result['success']:
        logger.info(result['message'])
        summary = result.get('summary')
        if summary:
            qber = summary['qber']['mean']
            duty = summary['duty']
            click.echo(f"intervals={summary['intervals']} "
                       f"mean_qber={'n/a' if qber is None else f'{qber:.4f}'} "
                       f"duty={'n/a' if duty is None else f'{duty:.4f}'} "
                       f"out={cfg.output_dir}")
    else:
        logger.error(f"{result['message']}: {result.get('error')}")
    sys.exit(result['exit_code'])


if __name__ == '__main__':
    cli()
