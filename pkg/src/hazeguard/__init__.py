"""Adversarially robust fine-tuning of a small dehazing transformer."""

__version__ = "0.1.0"
