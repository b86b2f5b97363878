import sys
from pathlib import Path

import click
from colorama import Back, Fore, Style

from ...modules.gradcheck import run_gradcheck
from ..app import cli
from ..common import EXIT_CHECK_FAILED, exit_codes, load_config


@cli.command()
@click.option('--config', 'config_path', type=click.Path(path_type=Path), default=None, help='YAML run config')
@click.option('--seed', type=int, default=None, help='Override gradcheck.seed')
@click.option('--exhaustive', is_flag=True, default=False, help='Check every parameter coordinate')
def gradcheck(config_path, seed, exhaustive):
    """
    Compare backward gradients with central differences for every objective.
    """
    with exit_codes():
        config = load_config(config_path, gradcheck__seed=seed).gradcheck
        if exhaustive:
            config = config.model_copy(update={'max_elements_per_tensor': None})
        report = run_gradcheck(config)

    print(f"\n{Fore.CYAN}Gradient check (tolerance {config.tolerance:g}){Style.RESET_ALL}\n")
    for check in report.checks:
        if check.passed:
            status = f"{Fore.GREEN}✓{Style.RESET_ALL}"
        else:
            status = f"{Style.BRIGHT}{Fore.RED}{Back.LIGHTBLACK_EX} ✗ {Style.RESET_ALL}"
        print(f"  {status} {check.name:<10} max rel error {check.max_rel_error:.3e}  worst: {check.worst_parameter}")
    print()
    if not report.passed:
        failed = ', '.join(c.name for c in report.checks if not c.passed)
        print(f"{Style.BRIGHT}{Fore.RED}Gradient check failed:{Style.RESET_ALL} {failed}")
        sys.exit(EXIT_CHECK_FAILED)
