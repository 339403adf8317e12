"""plotkit: figure rendering for prefill-scheduling experiment artifacts."""

from .figures import plot_attainment_curve, plot_blocking_bars
from .frames import SWEEP_COLUMNS, SweepFrame

__version__ = "0.1.0"
