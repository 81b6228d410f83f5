"""CaPaint: causal patch discovery, diffusion inpainting, and forecast augmentation."""

__version__ = "0.1.0"
