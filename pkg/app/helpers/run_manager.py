import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import toml
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from app.core.config import settings
from app.core.seeding import SeedStreams, configure_determinism
from app.helpers.exception_handler import ConfigError, first_error_path, get_message_validation
from app.schemas.sche_run import RunConfig

logger = logging.getLogger(__name__)


def run_options(func):
    """Flags shared by every subcommand; set values override the config file."""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="TOML run configuration."),
        click.option("--seed", type=int, default=None, help="Root seed."),
        click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory."),
        click.option("--checkpoint", type=click.Path(dir_okay=False), default=None, help="Model checkpoint."),
        click.option("--force", is_flag=True, default=False, help="Write into a non-empty output directory."),
        click.option("--dry-run", is_flag=True, default=False, help="Validate and print the plan only."),
        click.option("--threads", type=int, default=None, help="Torch intra-op threads."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _set_path(data: Dict[str, Any], key_path: str, value: Any) -> None:
    node = data
    keys = key_path.split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError("cannot override inside a scalar value", key_path=key_path)
    node[keys[-1]] = value


def load_run_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Parse a TOML run configuration and apply dotted-key overrides (None values are skipped).

    Raises:
        ConfigError: unreadable file, unknown key or invalid value, with its key path
    """
    data: Dict[str, Any] = {}
    if config_path:
        if not os.path.isfile(config_path):
            raise ConfigError(f"config file {config_path} not found", key_path="config")
        try:
            data = toml.load(config_path)
        except toml.TomlDecodeError as e:
            raise ConfigError(f"cannot parse {config_path}: {e}", key_path="config")
    for key_path, value in (overrides or {}).items():
        if value is not None:
            _set_path(data, key_path, value)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(get_message_validation(e), key_path=first_error_path(e))


def prepare_out_dir(out: str, force: bool = False) -> str:
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)", key_path="out")
    os.makedirs(out, exist_ok=True)
    return out


def write_effective_config(config: RunConfig, out: str) -> str:
    path = os.path.join(out, settings.EFFECTIVE_CONFIG_NAME)
    with open(path, "w") as fh:
        fh.write(config.to_toml())
    return path


def print_plan(title: str, rows: Sequence[Tuple[str, Any]], console: Optional[Console] = None) -> None:
    table = Table(title=title)
    table.add_column("step")
    table.add_column("detail")
    for step, detail in rows:
        table.add_row(str(step), str(detail))
    (console or Console()).print(table)


class RunContext(object):
    """Resolved configuration, seed streams and output directory of one command."""

    def __init__(self, config: RunConfig, dry_run: bool = False):
        self.config = config
        self.dry_run = dry_run
        self.streams = SeedStreams(config.seed)

    @classmethod
    def create(
        cls,
        config_path: Optional[str],
        seed: Optional[int] = None,
        out: Optional[str] = None,
        checkpoint: Optional[str] = None,
        threads: Optional[int] = None,
        force: bool = False,
        dry_run: bool = False,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> "RunContext":
        flags = {"seed": seed, "out": out, "checkpoint": checkpoint, "threads": threads}
        flags.update(overrides or {})
        config = load_run_config(config_path, flags)
        ctx = cls(config, dry_run)
        if not dry_run:
            prepare_out_dir(config.out, force)
            write_effective_config(config, config.out)
            configure_determinism(config.threads)
        logger.info("run seed=%d out=%s threads=%d", config.seed, config.out, config.threads)
        return ctx

    def path(self, name: str) -> str:
        return os.path.join(self.config.out, name)

    def require(self, key_path: str) -> Any:
        """Value at a dotted key path of the config; missing (None) values are a ConfigError."""
        value: Any = self.config
        for key in key_path.split("."):
            value = getattr(value, key)
        if value is None:
            raise ConfigError("value required", key_path=key_path)
        return value


def written(paths: List[str]) -> None:
    for path in paths:
        logger.info("wrote %s", path)
