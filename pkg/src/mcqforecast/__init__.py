"""Student answer-choice forecasting for multiple-choice questions."""

__version__ = "0.1.0"
