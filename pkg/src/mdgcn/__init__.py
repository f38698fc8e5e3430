"""Multi-modal dynamic graph convolution network for paired brain connectomes."""

__version__ = "0.1.0"
