"""Memory-discrepancy knowledge distillation for recurrent time-series classifiers."""

__version__ = "0.1.0"
