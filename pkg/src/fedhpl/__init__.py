"""Desk-scale simulator of federated prompt tuning with logit distillation."""

__version__ = "0.1.0"
