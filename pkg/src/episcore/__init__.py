"""Two-view geometry hypothesis pools, classical and learned scoring, and synthetic benchmarks."""

__version__ = "0.1.0"

SCHEMA_VERSION = 1
