"""Customer lifetime value and churn prediction from event logs."""

__version__ = "0.1.0"
