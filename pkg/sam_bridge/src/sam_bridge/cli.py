import sys
from pathlib import Path

import click

from .bridge import VARIANTS, BridgeConfig, device_from_env, serve


@click.command()
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None,
              help="Model checkpoint file (required unless --stub).")
@click.option("--variant", type=click.Choice(list(VARIANTS)), default="vit_b",
              show_default=True)
@click.option("--device", default=None,
              help="Inference device; defaults to $SAM_BRIDGE_DEVICE or cpu.")
@click.option("--stub", is_flag=True,
              help="Serve a deterministic fake model (protocol testing only).")
def main(checkpoint, variant, device, stub):
    """Serve box-prompted masks over standard streams (MP1 protocol)."""
    cfg = BridgeConfig(checkpoint=checkpoint, variant=variant,
                       device=device or device_from_env(), stub=stub)
    sys.exit(serve(cfg))


if __name__ == "__main__":
    main()
