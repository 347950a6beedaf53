"""Command line: materialize tiny checkpoints and serve a config.

Exit codes: 0 success, 2 configuration or startup error.
"""

from __future__ import annotations

import sys

import click

from . import __version__
from .config import load_config
from .errors import ServerError


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(2)


@click.group()
@click.version_option(version=__version__, prog_name="pyserver")
def main() -> None:
    """Reference wire-protocol v1.0 server over transformer checkpoints."""


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(), help="Serving config (YAML).")
@click.option("--log-level", default="info", show_default=True,
              help="uvicorn log level.")
def serve(config_path: str, log_level: str) -> None:
    """Load the configured checkpoints, then bind and serve."""
    from .app import serve as run_server
    try:
        cfg = load_config(config_path)
        run_server(cfg, log_level=log_level)
    except ServerError as exc:
        _fail(str(exc))


@main.command("make-tiny")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="Directory to write the checkpoint into.")
@click.option("--role", type=click.Choice(["policy", "reward"]),
              default="policy", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--vocab-size", type=int, default=32, show_default=True)
def make_tiny(out_dir: str, role: str, seed: int, vocab_size: int) -> None:
    """Write a small randomly initialized checkpoint for offline use."""
    from .models import make_tiny_checkpoint
    try:
        path = make_tiny_checkpoint(out_dir, role, seed=seed,
                                    vocab_size=vocab_size)
    except ValueError as exc:
        _fail(str(exc))
        return
    click.echo(f"wrote {role} checkpoint to {path}")


if __name__ == "__main__":
    main()
