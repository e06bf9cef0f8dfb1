"""Out-of-distribution image classification tricks on plain numpy."""

__version__ = "0.1.0"
