from pathlib import Path

import click
from colorama import Fore, Style

from ...config import get_settings
from ...pipeline import TrainingPipeline
from ..app import cli
from ..common import exit_codes, load_config
from ..progress import ProgressDisplay


@cli.command('synth-data')
@click.option('--config', 'config_path', type=click.Path(path_type=Path), default=None, help='YAML run config')
@click.option('--seed', type=int, default=None, help='Override task.seed')
@click.option('--output-dir', type=click.Path(path_type=Path), default=None, help='Directory for the corpus files')
def synth_data(config_path, seed, output_dir):
    """
    Write synthetic train/valid/test corpora.
    """
    with exit_codes():
        settings = get_settings()
        config = load_config(config_path, task__seed=seed)
        target = output_dir or (config.resolved_output_dir(settings) / 'data')
        paths = TrainingPipeline(settings, config).synthesize(target, progress_callback=ProgressDisplay.show)

    print(f"\n{Fore.GREEN}Wrote {len(paths)} corpus file(s) to {target}{Style.RESET_ALL}")
