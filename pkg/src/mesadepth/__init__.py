"""Desk-scale masked + geometric + supervised depth pre-training with CKA analysis."""

__version__ = "0.1.0"
