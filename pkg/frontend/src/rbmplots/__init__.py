"""Figures from rbmlab experiment outputs.

Reads the result.csv / manifest.json pair a recipe run writes and renders
the comparison figures (collapse curves, edge histograms, tail fits, table
heatmaps), each with a sidecar JSON of the exact plotted arrays.
"""

__version__ = "0.1.0"

from .figures import FigureSpec, RenderError, render
from .results import ResultTable, SchemaReport, load_results, validate

__all__ = [
    "FigureSpec",
    "RenderError",
    "ResultTable",
    "SchemaReport",
    "load_results",
    "render",
    "validate",
]
