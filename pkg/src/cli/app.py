import click
from colorama import init as colorama_init

from . import logging as _logging  # noqa: F401

# Initialize colorama for cross-platform colored output
colorama_init()


@click.group()
@click.version_option(version='0.1.0')
def cli():
    """
    dmlseq - Mutual learning for sequence-to-sequence Transformers

    Synthesize corpora, train cohorts of students that learn from the truth and
    from each other, evaluate by character error rate and compare objectives.
    """
    pass


from .commands import synth_data as _synth_data  # noqa: E402,F401
from .commands import train as _train  # noqa: E402,F401
from .commands import evaluate as _evaluate  # noqa: E402,F401
from .commands import compare as _compare  # noqa: E402,F401
from .commands import gradcheck as _gradcheck  # noqa: E402,F401
