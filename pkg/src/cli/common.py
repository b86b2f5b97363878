import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from colorama import Fore, Style

from ..config import RunConfig, load_run_config
from ..utils.exceptions import (
    CheckpointError,
    ConfigError,
    ContractError,
    CorpusParseError,
    NumericError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def fail(message: str, code: int) -> None:
    """Print an error in red and exit with `code`."""
    print(f"{Style.BRIGHT}{Fore.RED}Error:{Style.RESET_ALL} {message}")
    sys.exit(code)


@contextmanager
def exit_codes():
    """Map domain exceptions raised inside a command to the CLI exit-code contract."""
    try:
        yield
    except NumericError as e:
        logger.error(f"Numeric abort: {e}")
        fail(f"numeric abort: {e}", EXIT_NUMERIC)
    except CorpusParseError as e:
        logger.error(f"Corpus parse error at byte {e.offset}: {e}")
        fail(f"could not parse corpus (byte {e.offset}): {e}", EXIT_CONFIG)
    except (ConfigError, CheckpointError, ContractError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        fail(str(e), EXIT_CONFIG)


def load_config(config_path: Optional[Path], **overrides) -> RunConfig:
    """Load a run config, applying CLI flag overrides given as dotted keys (`trainer__workers`)."""
    dotted = {key.replace('__', '.'): value for key, value in overrides.items()}
    return load_run_config(config_path, dotted)
