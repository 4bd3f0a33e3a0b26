"""Figure renderer for experiment-run CSVs.

Reads the CSV reports written by the comodnet command line (metric logs,
reliability bins, spectra, gain dumps, embeddings, robustness sweeps,
sparsity counts) and renders them as deterministic vector figures. This
package only presents numbers that were already computed; it never
recomputes a statistic from raw data.
"""

from .figures import FigureRequest, FigureError, FIGURE_KINDS, render

__version__ = "0.1.0"

__all__ = ["FigureRequest", "FigureError", "FIGURE_KINDS", "render"]
