"""Slotted simulator of networked control loops over a lossy uplink
with a semantic aggregation layer in between."""

from .engine import ConfigError, RunResult, SimConfig, run, summarize, sweep
from .metrics import PlotSpec, load_config, render_plot, write_csv

__version__ = "0.1.0"
