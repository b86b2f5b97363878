from pathlib import Path

import click
from colorama import Fore, Style

from ...config import get_settings
from ...pipeline import TrainingPipeline
from ..app import cli
from ..common import exit_codes, load_config
from ..progress import ProgressDisplay


@cli.command()
@click.option('--config', 'config_path', type=click.Path(path_type=Path), default=None, help='YAML run config')
@click.option('--seed', type=int, default=None, help='Override the global seed')
@click.option('--output-dir', type=click.Path(path_type=Path), default=None, help='Run directory')
@click.option('--workers', type=click.IntRange(min=1), default=None, help='Thread-pool size')
@click.option('--max-epochs', type=click.IntRange(min=1), default=None, help='Override trainer.max_epochs')
@click.option('--beam', type=click.IntRange(min=1), default=None, help='Override decode.beam')
def compare(config_path, seed, output_dir, workers, max_epochs, beam):
    """
    Train and evaluate a grid of objectives; write comparison.csv.
    """
    with exit_codes():
        settings = get_settings()
        config = load_config(
            config_path,
            seed=seed,
            output_dir=str(output_dir) if output_dir else None,
            trainer__workers=workers,
            trainer__max_epochs=max_epochs,
            decode__beam=beam,
        )
        path = TrainingPipeline(settings, config, workers=workers).compare(progress_callback=ProgressDisplay.show)

    print(f"\n{Fore.GREEN}Comparison written to {path}{Style.RESET_ALL}")
