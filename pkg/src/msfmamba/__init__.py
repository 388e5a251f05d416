"""Motion-aware multiscale state fusion on selective state-space scans."""

__version__ = "0.1.0"
