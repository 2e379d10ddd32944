"""ffsplat: feed-forward 3D Gaussian splatting on CPU."""

__version__ = "0.1.0"
