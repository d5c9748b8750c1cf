"""Flow-warping video synthesis on a synthetic paired-video world."""

__version__ = "0.1.0"
