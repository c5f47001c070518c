"""Figure generation for multipath SLAM batch results."""

from .tables import MissingColumnError, ResultTable, load_results_dir
from .figures import plot_all

__all__ = ["MissingColumnError", "ResultTable", "load_results_dir", "plot_all"]
