"""Audio inpainting with absorbing-state discrete diffusion over codec tokens."""

__version__ = "0.1.0"
