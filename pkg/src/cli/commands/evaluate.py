from pathlib import Path

import click
from colorama import Fore, Style

from ...config import get_settings
from ...modules.checkpoint import load_checkpoint
from ...modules.data import FeatureStandardizer, read_corpus
from ...pipeline import TrainingPipeline
from ..app import cli
from ..common import exit_codes, load_config
from ..progress import ProgressDisplay


@cli.command()
@click.option('--checkpoint', type=click.Path(path_type=Path), required=True, help='Checkpoint to decode with')
@click.option('--corpus', 'corpus_paths', type=click.Path(path_type=Path), multiple=True, required=True, help='Corpus file (repeatable)')
@click.option('--beam', type=click.IntRange(min=1), default=None, help='Beam width (default: decode.beam)')
@click.option('--config', 'config_path', type=click.Path(path_type=Path), default=None, help='YAML run config')
@click.option('--output-dir', type=click.Path(path_type=Path), default=None, help='Where reports/ is written')
@click.option('--workers', type=click.IntRange(min=1), default=None, help='Utterances decoded in parallel')
def evaluate(checkpoint, corpus_paths, beam, config_path, output_dir, workers):
    """
    Decode corpora with a checkpoint and write CER reports.
    """
    with exit_codes():
        settings = get_settings()
        config = load_config(config_path, decode__beam=beam)
        params, meta = load_checkpoint(checkpoint)
        corpora = [read_corpus(p) for p in corpus_paths]
        if meta.feature_mean is not None and meta.feature_std is not None:
            standardizer = FeatureStandardizer.from_lists(meta.feature_mean, meta.feature_std)
            corpora = [standardizer.apply(c) for c in corpora]
        target = output_dir or checkpoint.parent.parent
        pipeline = TrainingPipeline(settings, config, workers=workers)
        reports = pipeline.evaluate(params, corpora, target, progress_callback=ProgressDisplay.show)

    print()
    for report in reports:
        print(f"{Fore.GREEN}{report.corpus}{Style.RESET_ALL}: CER {report.cer:.4f} "
              f"({report.errors}/{report.ref_length}, beam {report.beam})")
