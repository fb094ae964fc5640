"""Command-line front end for the weight-pack exporter."""

from __future__ import annotations

import sys

import click

from .export import BACKBONES, ChecksumError, export, make_reference


@click.command()
@click.argument("backbone", type=click.Choice(sorted(BACKBONES)))
@click.option("--out", required=True, help="Output FVW1 weight pack path.")
@click.option("--checkpoint", default=None,
              help="Local .pth checkpoint; omitted = seeded random init.")
@click.option("--sha256", "expected_sha256", default=None,
              help="Expected checkpoint digest (verified before loading).")
@click.option("--seed", type=int, default=0)
@click.option("--reference", default=None,
              help="Also write a reference activation pack to this path.")
@click.option("--side", type=int, default=64, help="Reference image side length.")
def cli(backbone, out, checkpoint, expected_sha256, seed, reference, side):
    """Export a backbone to an FVW1 weight pack (plus manifest)."""
    manifest = export(backbone, out, checkpoint=checkpoint, seed=seed,
                      expected_sha256=expected_sha256)
    click.echo(f"wrote {out} ({manifest['tensor_count']} tensors, "
               f"source {manifest['source']})")
    if reference:
        ref = make_reference(backbone, out, reference, side=side)
        click.echo(f"wrote reference pack {reference} "
                   f"(taps {sorted(ref['taps'])})")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 1
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except (FileNotFoundError, ChecksumError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
