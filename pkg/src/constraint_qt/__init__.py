"""Query translation restricted to target words mined from alignments and clicks."""

__version__ = "0.1.0"
