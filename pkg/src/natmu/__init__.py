"""Machine unlearning toolkit: hybrid-injection unlearning, relabeling
baselines, a retrain oracle, and an entropy-based evaluation suite."""

__version__ = "0.1.0"

from . import builder, data, masks, methods, metrics, nn  # noqa: F401
