"""Instance-aware architecture search over a weight-sharing meta-graph."""

__version__ = "0.1.0"
