"""ansguard CLI: layer-sensitivity guided adversarial example detection."""

import logging

import click

from ansguard import __version__
from ansguard.commands import (
    ablation,
    ans_cmd,
    attack_eval,
    blackbox,
    detector_cmd,
    dynamic,
    energy_report,
    inspect,
    quant_sweep_cmd,
    runs,
    train_cmd,
)

LOG_LEVELS = (logging.WARNING, logging.INFO, logging.DEBUG)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
@click.version_option(__version__, prog_name="ansguard")
def cli(verbose: int) -> None:
    """Train CNNs, attack them, and detect the attacks from hidden activations."""
    logging.basicConfig(
        level=LOG_LEVELS[min(verbose, len(LOG_LEVELS) - 1)],
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


cli.add_command(train_cmd)
cli.add_command(attack_eval)
cli.add_command(ans_cmd)
cli.add_command(ablation)
cli.add_command(detector_cmd)
cli.add_command(dynamic)
cli.add_command(blackbox)
cli.add_command(quant_sweep_cmd)
cli.add_command(energy_report)
cli.add_command(inspect)
cli.add_command(runs)
