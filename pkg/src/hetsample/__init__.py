"""Heterogeneous subset sampling over discretized feature spaces."""

__version__ = "0.1.0"
TOOL_VERSION = f"hetsample {__version__}"
