"""Bridge CLI: `mrvg-bridge extract --images <dir> --out <dir> [--config <file>]`."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import BridgeError
from .backbones import BridgeConfig
from .extract import MANIFEST_NAME, extract


@click.group()
def main() -> None:
    """Backbone extraction for the grounding pipeline."""


@main.command("extract")
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def extract_cmd(images_dir, out_dir, config_path):
    """Write features.json plus patch-grid tensors for every image."""
    config = BridgeConfig()
    if config_path:
        try:
            config = BridgeConfig.from_dict(json.loads(Path(config_path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise click.ClickException(f"cannot read config {config_path}: {exc}")
    try:
        manifest = extract(images_dir, out_dir, config)
    except BridgeError as exc:
        raise click.ClickException(str(exc))
    n_proposals = sum(len(e.get("proposals", [])) for e in manifest["images"].values())
    n_templates = sum(len(v) for v in manifest["templates"].values())
    click.echo(
        f"wrote {Path(out_dir) / MANIFEST_NAME}: {len(manifest['images'])} images, "
        f"{n_proposals} proposals, {n_templates} template grids"
    )


if __name__ == "__main__":
    sys.exit(main())
