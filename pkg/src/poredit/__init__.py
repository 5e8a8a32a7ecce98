"""poredit: diffusion-transformer generation and physics validation of
binary porous-media volumes."""

__version__ = "0.1.0"

__all__ = [
    "cli",
    "diffusion",
    "lbm",
    "metrics",
    "ndtensor",
    "network",
    "rng",
    "tiling",
    "training",
    "volume",
]
