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
@click.option('--workers', type=click.IntRange(min=1), default=None, help='Thread-pool size for the cohort')
@click.option('--max-epochs', type=click.IntRange(min=1), default=None, help='Override trainer.max_epochs')
def train(config_path, seed, output_dir, workers, max_epochs):
    """
    Train a cohort of students and select the model to keep.

    Writes per-student best checkpoints, metrics.jsonl, config.yaml and
    selected.json into the run directory.
    """
    with exit_codes():
        settings = get_settings()
        config = load_config(
            config_path,
            seed=seed,
            output_dir=str(output_dir) if output_dir else None,
            trainer__workers=workers,
            trainer__max_epochs=max_epochs,
        )
        pipeline = TrainingPipeline(settings, config, workers=workers)
        outcome = pipeline.train(progress_callback=ProgressDisplay.show)

    result = outcome.train
    stop = "early stop" if result.stopped_early else "max epochs"
    print(f"\n{Fore.GREEN}Training finished after {result.epochs_run} epoch(s) ({stop}){Style.RESET_ALL}")
    for info in result.checkpoints:
        marker = " (selected)" if info.student == outcome.selection.info.student else ""
        print(f"  student {info.student}: valid loss {info.valid_loss:.4f} at epoch {info.epoch} -> {info.path}{marker}")
